//! The compress-and-retrieve store.
//!
//! A store holds the base checkpoint `Θ0`, one accumulated multi-delta
//! `Δ★ = λ Σ O_i Δ_i`, and a registry of per-model seeds. Model `i` is
//! recovered as `Θ0 + O_i⁻¹ Δ★`; the other models' deltas remain as
//! decorrelated interference. Individual deltas are never kept, so adding a
//! model costs one manifest entry, not one checkpoint.

mod lora;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::PRNG_VERSION;
use crate::schema::{parse_schema, select_targets, ModelSchema, NamingConvention, TargetSelector};
use crate::tensor::{self, TensorMap};
use crate::transforms::{materialize, DeltaTransform, MaterializedTransform, TransformMode, TransformSpec};

pub use lora::{LoraAdapter, LoraFactors, LORA_A_SUFFIX, LORA_B_SUFFIX, LORA_SCALE_KEY};
pub use manifest::{Manifest, ManifestTask, MANIFEST_FILE, MULTI_DELTA_FILE, STORE_FORMAT_VERSION};

/// Relative deviation of a re-supplied delta norm tolerated by [`SuperpositionStore::remove_model`].
pub const DELTA_NORM_TOLERANCE: f64 = 1e-4;

/// Metadata key naming the task a retrieved checkpoint belongs to.
pub const TASK_ID_KEY: &str = "task_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    FullFinetune,
    Lora,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// A full fine-tuned checkpoint with the same structure as the base.
    Full(TensorMap),
    Lora(LoraAdapter),
}

impl ModelSource {
    pub fn kind(&self) -> SourceKind {
        match self {
            ModelSource::Full(_) => SourceKind::FullFinetune,
            ModelSource::Lora(_) => SourceKind::Lora,
        }
    }

    pub fn lora_scale(&self) -> f32 {
        match self {
            ModelSource::Full(_) => 1.0,
            ModelSource::Lora(a) => a.scale,
        }
    }

    /// `Θ_i − Θ0`, or the densified `scale · B A` for adapters.
    pub fn delta(&self, base: &TensorMap) -> Result<TensorMap> {
        match self {
            ModelSource::Full(model) => tensor::sub(model, base),
            ModelSource::Lora(adapter) => adapter.densify(base),
        }
    }

    /// Interprets a checkpoint: all-LoRA-factor maps become adapters.
    pub fn from_checkpoint(map: TensorMap) -> Result<Self> {
        if LoraAdapter::looks_like_adapter(&map) {
            Ok(ModelSource::Lora(LoraAdapter::from_tensor_map(&map)?))
        } else {
            Ok(ModelSource::Full(map))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub task_id: String,
    pub source: ModelSource,
}

impl ModelInput {
    pub fn full(task_id: impl Into<String>, model: TensorMap) -> Self {
        Self {
            task_id: task_id.into(),
            source: ModelSource::Full(model),
        }
    }

    pub fn lora(task_id: impl Into<String>, adapter: LoraAdapter) -> Self {
        Self {
            task_id: task_id.into(),
            source: ModelSource::Lora(adapter),
        }
    }
}

/// Store-wide settings. All are fixed at creation; changing λ means recompressing.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub lambda: f32,
    pub mode: TransformMode,
    pub global_seed: u64,
    pub selector: TargetSelector,
    pub naming_convention: NamingConvention,
    /// Required for the non-orthogonal `rd` ablation mode.
    pub allow_non_orthogonal: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mode: TransformMode::Srsf,
            global_seed: 42,
            selector: TargetSelector::all(),
            naming_convention: NamingConvention::default(),
            allow_non_orthogonal: false,
        }
    }
}

impl StoreConfig {
    pub fn new(mode: TransformMode) -> Self {
        Self {
            mode,
            allow_non_orthogonal: !mode.is_orthogonal(),
            ..Self::default()
        }
    }

    pub fn lambda(mut self, lambda: f32) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn seed(mut self, global_seed: u64) -> Self {
        self.global_seed = global_seed;
        self
    }

    pub fn selector(mut self, selector: TargetSelector) -> Self {
        self.selector = selector;
        self
    }

    pub fn naming_convention(mut self, convention: NamingConvention) -> Self {
        self.naming_convention = convention;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0 && self.lambda <= 2.0) {
            return Err(Error::Config(format!(
                "lambda must lie in (0, 2], got {}",
                self.lambda
            )));
        }
        if !self.mode.is_orthogonal() && !self.allow_non_orthogonal {
            return Err(Error::InvalidSpec(format!(
                "mode `{}` is not orthogonal; enable it explicitly for ablations",
                self.mode
            )));
        }
        self.selector.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry {
    pub task_id: String,
    pub model_index: u64,
    pub source_kind: SourceKind,
    pub lora_scale: f32,
    /// `‖Δ_i‖_F` at insertion.
    pub delta_norm: f64,
}

/// Byte sizes of a saved store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreFiles {
    pub multi_delta_bytes: u64,
    pub manifest_bytes: u64,
}

impl StoreFiles {
    pub fn total(&self) -> u64 {
        self.multi_delta_bytes + self.manifest_bytes
    }
}

#[derive(Debug, Clone)]
pub struct SuperpositionStore {
    base: TensorMap,
    base_sha256: String,
    multi_delta: TensorMap,
    config: StoreConfig,
    schema: ModelSchema,
    registry: Vec<TaskEntry>,
}

impl SuperpositionStore {
    /// A store with no models; its multi-delta is all zeros.
    pub fn empty(base: TensorMap, config: StoreConfig) -> Result<Self> {
        let base_sha256 = checkpoint::map_sha256(&base)?;
        Self::with_base_hash(base, base_sha256, config)
    }

    fn with_base_hash(base: TensorMap, base_sha256: String, config: StoreConfig) -> Result<Self> {
        config.validate()?;
        let schema = parse_schema(&base, &config.naming_convention)?;
        select_targets(&schema, &config.selector)?;
        Ok(Self {
            multi_delta: base.zeros_like(),
            base,
            base_sha256,
            config,
            schema,
            registry: Vec::new(),
        })
    }

    /// Builds `Θ0 + λ Σ O_i Δ_i`, summing in input order with `model_index = i`.
    pub fn compress(
        base: TensorMap,
        models: impl IntoIterator<Item = ModelInput>,
        config: StoreConfig,
    ) -> Result<Self> {
        let mut store = Self::empty(base, config)?;
        for model in models {
            store.add_model(model)?;
        }
        Ok(store)
    }

    pub fn base(&self) -> &TensorMap {
        &self.base
    }

    pub fn base_sha256(&self) -> &str {
        &self.base_sha256
    }

    pub fn multi_delta(&self) -> &TensorMap {
        &self.multi_delta
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn lambda(&self) -> f32 {
        self.config.lambda
    }

    pub fn schema(&self) -> &ModelSchema {
        &self.schema
    }

    pub fn registry(&self) -> &[TaskEntry] {
        &self.registry
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.registry.iter().map(|e| e.task_id.as_str())
    }

    pub fn entry(&self, task_id: &str) -> Result<&TaskEntry> {
        self.registry
            .iter()
            .find(|e| e.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn transform_spec(&self, model_index: u64) -> TransformSpec {
        TransformSpec::new(
            self.config.mode,
            self.config.global_seed,
            model_index,
            self.config.selector.clone(),
        )
    }

    pub fn transform_for(&self, task_id: &str) -> Result<MaterializedTransform> {
        let entry = self.entry(task_id)?;
        materialize(&self.transform_spec(entry.model_index), &self.schema)
    }

    /// `λ · O Δ` for a model that is (or would be) stored under `model_index`.
    fn scaled_transformed_delta(&self, source: &ModelSource, model_index: u64) -> Result<(TensorMap, f64)> {
        let delta = source.delta(&self.base)?;
        let norm = tensor::frobenius_norm(&delta);
        let t = materialize(&self.transform_spec(model_index), &self.schema)?;
        Ok((t.apply(&delta)?, norm))
    }

    /// Hot-adds a model under the next free index without touching existing entries.
    pub fn add_model(&mut self, input: ModelInput) -> Result<&TaskEntry> {
        if self.registry.iter().any(|e| e.task_id == input.task_id) {
            return Err(Error::DuplicateTask(input.task_id));
        }
        let model_index = self
            .registry
            .iter()
            .map(|e| e.model_index + 1)
            .max()
            .unwrap_or(0);
        let (transformed, delta_norm) = self.scaled_transformed_delta(&input.source, model_index)?;
        self.multi_delta = tensor::axpy(self.config.lambda, &transformed, &self.multi_delta)?;
        self.registry.push(TaskEntry {
            task_id: input.task_id,
            model_index,
            source_kind: input.source.kind(),
            lora_scale: input.source.lora_scale(),
            delta_norm,
        });
        Ok(self.registry.last().expect("just pushed"))
    }

    /// Subtracts a model's contribution. The caller re-supplies the original
    /// checkpoint; it must reproduce the recorded delta norm.
    pub fn remove_model(&mut self, task_id: &str, source: &ModelSource) -> Result<TaskEntry> {
        let pos = self
            .registry
            .iter()
            .position(|e| e.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        let entry = &self.registry[pos];
        let (transformed, norm) = self.scaled_transformed_delta(source, entry.model_index)?;
        let recorded = entry.delta_norm;
        let deviation = if recorded > 0.0 {
            (norm - recorded).abs() / recorded
        } else {
            norm
        };
        if deviation > DELTA_NORM_TOLERANCE {
            return Err(Error::Integrity(format!(
                "checkpoint for `{task_id}` has delta norm {norm}, store recorded {recorded}"
            )));
        }
        self.multi_delta = tensor::axpy(-self.config.lambda, &transformed, &self.multi_delta)?;
        Ok(self.registry.remove(pos))
    }

    /// `Θ0 + O_i⁻¹ Δ★`. Base tensors absent from the multi-delta pass through.
    pub fn retrieve(&self, task_id: &str) -> Result<TensorMap> {
        let t = self.transform_for(task_id)?;
        let recovered = t.apply_inverse(&self.multi_delta)?;
        let mut out = TensorMap::new();
        for (name, base_t) in self.base.iter() {
            let tensor = match recovered.get(name) {
                Some(d) => {
                    let data = base_t.data().iter().zip(d.data()).map(|(b, d)| b + d).collect();
                    crate::tensor::Tensor::new(base_t.shape().to_vec(), data)?
                }
                None => base_t.clone(),
            };
            out.insert(name, tensor)?;
        }
        *out.metadata_mut() = self.base.metadata().clone();
        out.metadata_mut().insert(TASK_ID_KEY.into(), task_id.to_string());
        Ok(out)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: STORE_FORMAT_VERSION,
            prng_version: PRNG_VERSION,
            lambda: self.config.lambda,
            mode: self.config.mode,
            global_seed: self.config.global_seed,
            selector: self.config.selector.clone(),
            naming_convention: self.config.naming_convention.clone(),
            base_sha256: self.base_sha256.clone(),
            tasks: self
                .registry
                .iter()
                .map(|e| ManifestTask {
                    task_id: e.task_id.clone(),
                    model_index: e.model_index,
                    source_kind: e.source_kind,
                    lora_scale: e.lora_scale,
                    delta_norm: e.delta_norm,
                })
                .collect(),
        }
    }

    /// Writes `multi_delta.rdck` and `manifest.json` into `dir` (created if needed).
    /// The base checkpoint is referenced by hash, not copied.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<StoreFiles> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let multi_delta_bytes = checkpoint::write(dir.join(MULTI_DELTA_FILE), &self.multi_delta)?;
        let mut manifest = serde_json::to_vec(&self.manifest())?;
        manifest.push(b'\n');
        checkpoint::write_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(StoreFiles {
            multi_delta_bytes,
            manifest_bytes: manifest.len() as u64,
        })
    }

    pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
        let bytes = fs::read(dir.as_ref().join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("corrupt manifest: {e}")))?;
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "store format version {}, this build reads {STORE_FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        if manifest.prng_version != PRNG_VERSION {
            return Err(Error::Version(format!(
                "manifest uses PRNG pipeline version {}, this build implements {PRNG_VERSION}",
                manifest.prng_version
            )));
        }
        Ok(manifest)
    }

    /// Loads a store against an in-memory base, checked by its canonical hash.
    pub fn load(dir: impl AsRef<Path>, base: TensorMap) -> Result<Self> {
        let hash = checkpoint::map_sha256(&base)?;
        Self::load_inner(dir.as_ref(), base, hash)
    }

    /// Loads a store against a base checkpoint file, checked by the file's hash.
    pub fn load_with_base_file(dir: impl AsRef<Path>, base_path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(base_path)?;
        let hash = checkpoint::sha256_hex(&bytes);
        let base = checkpoint::decode(&bytes)?;
        Self::load_inner(dir.as_ref(), base, hash)
    }

    fn load_inner(dir: &Path, base: TensorMap, base_hash: String) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        if manifest.base_sha256 != base_hash {
            return Err(Error::Integrity(format!(
                "base checkpoint hash {base_hash} does not match manifest {}",
                manifest.base_sha256
            )));
        }
        let config = StoreConfig {
            lambda: manifest.lambda,
            mode: manifest.mode,
            global_seed: manifest.global_seed,
            selector: manifest.selector,
            naming_convention: manifest.naming_convention,
            allow_non_orthogonal: !manifest.mode.is_orthogonal(),
        };
        let mut store = Self::with_base_hash(base, base_hash, config)?;
        let multi_delta = checkpoint::read(dir.join(MULTI_DELTA_FILE))?;
        for (name, t) in multi_delta.iter() {
            let b = store
                .base
                .get(name)
                .ok_or_else(|| Error::mismatch(name, "multi-delta tensor absent from base"))?;
            if b.shape() != t.shape() {
                return Err(Error::mismatch(
                    name,
                    format!("multi-delta shape {:?} vs base {:?}", t.shape(), b.shape()),
                ));
            }
        }
        store.multi_delta = multi_delta;
        for task in manifest.tasks {
            if store.registry.iter().any(|e| e.task_id == task.task_id) {
                return Err(Error::Format(format!(
                    "manifest lists task `{}` twice",
                    task.task_id
                )));
            }
            store.registry.push(TaskEntry {
                task_id: task.task_id,
                model_index: task.model_index,
                source_kind: task.source_kind,
                lora_scale: task.lora_scale,
                delta_norm: task.delta_norm,
            });
        }
        Ok(store)
    }
}

/// Paths of the two files making up a saved store.
pub fn store_paths(dir: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    (dir.join(MULTI_DELTA_FILE), dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn base() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("input.embed", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap()).unwrap();
        for k in 1..=2 {
            let v = k as f32;
            m.insert(format!("blocks.{k}.w"), Tensor::new(vec![2, 2], vec![v, -v, 0.25, 2.0]).unwrap())
                .unwrap();
        }
        m
    }

    fn shifted(base: &TensorMap, by: f32) -> TensorMap {
        base.iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| v + by).collect();
                (n.to_string(), Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect()
    }

    #[test]
    fn empty_store_is_base() {
        let store = SuperpositionStore::compress(base(), [], StoreConfig::default()).unwrap();
        assert_eq!(store.multi_delta().max_abs(), 0.0);
        assert!(matches!(store.retrieve("x"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn single_identity_model_stores_its_delta() {
        let b = base();
        let m = shifted(&b, 0.125);
        let store = SuperpositionStore::compress(
            b.clone(),
            [ModelInput::full("a", m.clone())],
            StoreConfig::new(TransformMode::Identity),
        )
        .unwrap();
        assert!(store.multi_delta().bit_eq(&tensor::sub(&m, &b).unwrap()));
        assert!(store.retrieve("a").unwrap().bit_eq(&m));
    }

    #[test]
    fn lambda_range_enforced() {
        for bad in [0.0, -1.0, 2.5, f32::NAN] {
            let cfg = StoreConfig::default().lambda(bad);
            assert!(matches!(SuperpositionStore::empty(base(), cfg), Err(Error::Config(_))));
        }
        assert!(SuperpositionStore::empty(base(), StoreConfig::default().lambda(2.0)).is_ok());
    }

    #[test]
    fn rd_requires_explicit_opt_in() {
        let mut cfg = StoreConfig::new(TransformMode::Rd);
        assert!(SuperpositionStore::empty(base(), cfg.clone()).is_ok());
        cfg.allow_non_orthogonal = false;
        assert!(matches!(SuperpositionStore::empty(base(), cfg), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn duplicate_task_rejected() {
        let b = base();
        let err = SuperpositionStore::compress(
            b.clone(),
            [ModelInput::full("a", shifted(&b, 1.0)), ModelInput::full("a", shifted(&b, 2.0))],
            StoreConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateTask(id) if id == "a"));
    }

    #[test]
    fn structural_mismatch_names_tensor() {
        let b = base();
        let mut bad = shifted(&b, 1.0);
        *bad.get_mut("blocks.2.w").unwrap() = Tensor::zeros(&[4]);
        let err = SuperpositionStore::compress(b, [ModelInput::full("a", bad)], StoreConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::StructuralMismatch { name, .. } if name == "blocks.2.w"));
    }

    #[test]
    fn remove_checks_delta_norm() {
        let b = base();
        let mut store = SuperpositionStore::compress(
            b.clone(),
            [ModelInput::full("a", shifted(&b, 0.5))],
            StoreConfig::default(),
        )
        .unwrap();
        let wrong = ModelSource::Full(shifted(&b, 0.75));
        assert!(matches!(store.remove_model("a", &wrong), Err(Error::Integrity(_))));
        assert_eq!(store.registry().len(), 1);
        assert!(matches!(
            store.remove_model("zzz", &wrong),
            Err(Error::UnknownTask(_))
        ));
        store.remove_model("a", &ModelSource::Full(shifted(&b, 0.5))).unwrap();
        assert!(store.multi_delta().max_abs() < 1e-6);
        assert!(matches!(store.retrieve("a"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn next_index_follows_max() {
        let b = base();
        let mut store = SuperpositionStore::compress(
            b.clone(),
            (0..3).map(|i| ModelInput::full(format!("m{i}"), shifted(&b, i as f32 * 0.25))),
            StoreConfig::default(),
        )
        .unwrap();
        store
            .remove_model("m1", &ModelSource::Full(shifted(&b, 0.25)))
            .unwrap();
        let e = store.add_model(ModelInput::full("m3", shifted(&b, 1.0))).unwrap();
        assert_eq!(e.model_index, 3);
        let indices: Vec<u64> = store.registry().iter().map(|e| e.model_index).collect();
        assert_eq!(indices, [0, 2, 3]);
    }

    #[test]
    fn retrieved_checkpoint_is_tagged() {
        let b = base();
        let store = SuperpositionStore::compress(
            b.clone(),
            [ModelInput::full("a", shifted(&b, 0.5))],
            StoreConfig::default(),
        )
        .unwrap();
        assert_eq!(store.retrieve("a").unwrap().metadata()[TASK_ID_KEY], "a");
    }
}
