//! Interference and decorrelation measurements.
//!
//! When model `i` is retrieved, the other models survive as the residual
//! `λ Σ_{j≠i} O_i⁻¹ O_j Δ_j`. Its Frobenius norm is computed two ways: by direct
//! summation, and through the cosine expansion
//! `λ² (Σ_j ‖T_j‖² + 2 Σ_{j<k} ‖T_j‖ ‖T_k‖ cos(T_j, T_k))` with `T_j = O_i⁻¹ O_j Δ_j`.
//! Agreement of the two is a check on the transforms and on the arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::ModelSchema;
use crate::tensor::TensorMap;
use crate::transforms::DeltaTransform;

/// Radicands in `[-RADICAND_CLAMP, 0)` are rounding noise and are treated as zero.
pub const RADICAND_CLAMP: f64 = 1e-9;

fn check_inputs<T>(deltas: &[TensorMap], transforms: &[T], i: usize) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("no deltas given".into()));
    }
    if deltas.len() != transforms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} deltas but {} transforms",
            deltas.len(),
            transforms.len()
        )));
    }
    if i >= deltas.len() {
        return Err(Error::InvalidArgument(format!(
            "task index {i} out of range for {} deltas",
            deltas.len()
        )));
    }
    Ok(())
}

/// `O_i⁻¹ O_j Δ_j` for every `j ≠ i`, in index order.
pub fn interfering_deltas<T: DeltaTransform>(
    deltas: &[TensorMap],
    transforms: &[T],
    i: usize,
) -> Result<Vec<TensorMap>> {
    check_inputs(deltas, transforms, i)?;
    deltas
        .iter()
        .zip(transforms)
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, (d, t))| transforms[i].apply_inverse(&t.apply(d)?))
        .collect()
}

/// Elementwise f64 sum of the interfering terms, then its norm.
fn summed_norm(terms: &[TensorMap]) -> Result<f64> {
    let Some(first) = terms.first() else {
        return Ok(0.0);
    };
    for t in &terms[1..] {
        first.check_same_structure(t)?;
    }
    let mut sq = 0.0f64;
    for (name, tensor) in first.iter() {
        let mut acc: Vec<f64> = tensor.data().iter().map(|&v| f64::from(v)).collect();
        for t in &terms[1..] {
            let data = t.get(name).expect("structure checked").data();
            for (a, &v) in acc.iter_mut().zip(data) {
                *a += f64::from(v);
            }
        }
        sq += acc.iter().map(|a| a * a).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// `‖λ Σ_{j≠i} O_i⁻¹ O_j Δ_j‖_F`, accumulated in f64.
pub fn interference_norm_direct<T: DeltaTransform>(
    deltas: &[TensorMap],
    transforms: &[T],
    i: usize,
    lambda: f64,
) -> Result<f64> {
    let terms = interfering_deltas(deltas, transforms, i)?;
    Ok(lambda.abs() * summed_norm(&terms)?)
}

fn expansion_from_terms(terms: &[TensorMap], lambda: f64) -> Result<f64> {
    let norms: Vec<f64> = terms.iter().map(norm_f64).collect();
    let mut radicand: f64 = norms.iter().map(|n| n * n).sum();
    for j in 0..terms.len() {
        for k in j + 1..terms.len() {
            if let Some(c) = map_cosine(&terms[j], &terms[k])? {
                radicand += 2.0 * norms[j] * norms[k] * c;
            }
        }
    }
    if (-RADICAND_CLAMP..0.0).contains(&radicand) {
        radicand = 0.0;
    }
    if radicand < 0.0 {
        return Err(Error::NumericalDegeneracy(format!(
            "interference expansion has negative radicand {radicand}"
        )));
    }
    Ok(lambda.abs() * radicand.sqrt())
}

/// The same norm through the pairwise cosine expansion.
pub fn interference_norm_expansion<T: DeltaTransform>(
    deltas: &[TensorMap],
    transforms: &[T],
    i: usize,
    lambda: f64,
) -> Result<f64> {
    let terms = interfering_deltas(deltas, transforms, i)?;
    expansion_from_terms(&terms, lambda)
}

fn norm_f64(x: &TensorMap) -> f64 {
    crate::tensor::frobenius_norm(x)
}

/// Cosine of two maps, `None` when either has zero norm.
fn map_cosine(x: &TensorMap, y: &TensorMap) -> Result<Option<f64>> {
    let (nx, ny) = (norm_f64(x), norm_f64(y));
    if nx == 0.0 || ny == 0.0 {
        x.check_same_structure(y)?;
        return Ok(None);
    }
    let d = crate::tensor::dot(x, y)?;
    Ok(Some((d / (nx * ny)).clamp(-1.0, 1.0)))
}

fn slice_cosine(x: &[f32], y: &[f32]) -> Option<f64> {
    let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (f64::from(a), f64::from(b));
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return None;
    }
    Some((xy / (xx.sqrt() * yy.sqrt())).clamp(-1.0, 1.0))
}

/// Summary over the off-diagonal, non-null entries of a cosine matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub mean: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Number of pairs that entered the summary. All statistics are 0 when it is 0.
    pub pairs: usize,
}

impl CosineSummary {
    fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut sum, mut sum_abs, mut max_abs, mut n) = (0.0, 0.0, 0.0f64, 0usize);
        for v in values {
            sum += v;
            sum_abs += v.abs();
            max_abs = max_abs.max(v.abs());
            n += 1;
        }
        if n == 0 {
            return Self {
                mean: 0.0,
                mean_abs: 0.0,
                max_abs: 0.0,
                pairs: 0,
            };
        }
        Self {
            mean: sum / n as f64,
            mean_abs: sum_abs / n as f64,
            max_abs,
            pairs: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    /// Symmetric; `None` where either delta has zero norm.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub summary: CosineSummary,
}

fn cosine_matrix(maps: &[TensorMap]) -> Result<CosineStats> {
    let n = maps.len();
    let mut matrix = vec![vec![None; n]; n];
    let mut upper = Vec::new();
    for j in 0..n {
        matrix[j][j] = map_cosine(&maps[j], &maps[j])?;
        for k in j + 1..n {
            let c = map_cosine(&maps[j], &maps[k])?;
            matrix[j][k] = c;
            matrix[k][j] = c;
            upper.extend(c);
        }
    }
    Ok(CosineStats {
        matrix,
        summary: CosineSummary::from_values(upper),
    })
}

/// Pairwise cosines of `O_j Δ_j` (or of the raw deltas when `transforms` is `None`).
pub fn pairwise_cosine_stats<T: DeltaTransform>(
    deltas: &[TensorMap],
    transforms: Option<&[T]>,
) -> Result<CosineStats> {
    if deltas.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairwise cosines need at least 2 deltas, got {}",
            deltas.len()
        )));
    }
    match transforms {
        None => cosine_matrix(deltas),
        Some(ts) => {
            check_inputs(deltas, ts, 0)?;
            let transformed = deltas
                .iter()
                .zip(ts)
                .map(|(d, t)| t.apply(d))
                .collect::<Result<Vec<_>>>()?;
            cosine_matrix(&transformed)
        }
    }
}

/// Per-layer cosines for one layer group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCosines {
    /// Same model, different blocks of this layer type.
    pub within_model: Vec<f64>,
    /// Same layer, different models.
    pub across_models: Vec<f64>,
}

/// Layer-level cosine distributions, grouped by layer type. Zero-norm layers are skipped.
pub fn layer_cosine_distributions(
    deltas: &[TensorMap],
    schema: &ModelSchema,
) -> Result<BTreeMap<String, GroupCosines>> {
    for d in deltas {
        schema.check_conforms(d)?;
    }
    let mut out = BTreeMap::new();
    for (layer_type, names) in &schema.groups {
        let mut g = GroupCosines::default();
        for d in deltas {
            for a in 0..names.len() {
                for b in a + 1..names.len() {
                    let x = d.require(&names[a])?.data();
                    let y = d.require(&names[b])?.data();
                    g.within_model.extend(slice_cosine(x, y));
                }
            }
        }
        for name in names {
            for a in 0..deltas.len() {
                for b in a + 1..deltas.len() {
                    let x = deltas[a].require(name)?.data();
                    let y = deltas[b].require(name)?.data();
                    g.across_models.extend(slice_cosine(x, y));
                }
            }
        }
        out.insert(layer_type.clone(), g);
    }
    Ok(out)
}

/// Retrieval-time interference seen by one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub task_id: String,
    pub lambda: f64,
    pub direct_norm: f64,
    pub expansion_norm: f64,
    pub mean_abs_cosine: f64,
    /// Row/column order of `pairwise`.
    pub interfering_task_ids: Vec<String>,
    /// Cosines between the interfering terms `O_i⁻¹ O_j Δ_j`.
    pub pairwise: Vec<Vec<Option<f64>>>,
}

impl InterferenceReport {
    pub fn compute<T: DeltaTransform>(
        task_ids: &[String],
        deltas: &[TensorMap],
        transforms: &[T],
        i: usize,
        lambda: f64,
    ) -> Result<Self> {
        if task_ids.len() != deltas.len() {
            return Err(Error::InvalidArgument(format!(
                "{} task ids but {} deltas",
                task_ids.len(),
                deltas.len()
            )));
        }
        let terms = interfering_deltas(deltas, transforms, i)?;
        let direct_norm = lambda.abs() * summed_norm(&terms)?;
        let expansion_norm = expansion_from_terms(&terms, lambda)?;
        let stats = cosine_matrix(&terms)?;
        Ok(Self {
            task_id: task_ids[i].clone(),
            lambda,
            direct_norm,
            expansion_norm,
            mean_abs_cosine: stats.summary.mean_abs,
            interfering_task_ids: task_ids
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, id)| id.clone())
                .collect(),
            pairwise: stats.matrix,
        })
    }

    /// One report per task.
    pub fn compute_all<T: DeltaTransform>(
        task_ids: &[String],
        deltas: &[TensorMap],
        transforms: &[T],
        lambda: f64,
    ) -> Result<Vec<Self>> {
        (0..deltas.len())
            .map(|i| Self::compute(task_ids, deltas, transforms, i, lambda))
            .collect()
    }

    pub fn relative_gap(&self) -> f64 {
        (self.direct_norm - self.expansion_norm).abs() / self.direct_norm.max(1e-12)
    }

    pub const CSV_HEADER: &'static str =
        "task_id,lambda,direct_norm,expansion_norm,mean_abs_cosine,task_j,task_k,cosine";

    /// One row per unordered pair of interfering tasks; a task with fewer than
    /// two interfering tasks emits a single row with empty pair columns.
    pub fn csv_rows(&self) -> Vec<String> {
        let prefix = format!(
            "{},{},{},{},{}",
            self.task_id, self.lambda, self.direct_norm, self.expansion_norm, self.mean_abs_cosine
        );
        let ids = &self.interfering_task_ids;
        let mut rows = Vec::new();
        for j in 0..ids.len() {
            for k in j + 1..ids.len() {
                let c = self.pairwise[j][k].map(|c| c.to_string()).unwrap_or_default();
                rows.push(format!("{prefix},{},{},{c}", ids[j], ids[k]));
            }
        }
        if rows.is_empty() {
            rows.push(format!("{prefix},,,"));
        }
        rows
    }

    pub fn to_csv(reports: &[Self]) -> String {
        let mut out = String::new();
        writeln!(out, "{}", Self::CSV_HEADER).expect("writing to a String");
        for r in reports {
            for row in r.csv_rows() {
                writeln!(out, "{row}").expect("writing to a String");
            }
        }
        out
    }
}
