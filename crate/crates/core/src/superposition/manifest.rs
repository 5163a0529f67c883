//! `manifest.json`: the seed registry that, together with the base checkpoint
//! and `multi_delta.rdck`, fully specifies every stored model.

use serde::{Deserialize, Serialize};

use crate::schema::{NamingConvention, TargetSelector};
use crate::transforms::TransformMode;

use super::SourceKind;

/// Version of the store layout (manifest + multi-delta file).
pub const STORE_FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MULTI_DELTA_FILE: &str = "multi_delta.rdck";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub prng_version: u32,
    pub lambda: f32,
    pub mode: TransformMode,
    pub global_seed: u64,
    pub selector: TargetSelector,
    pub naming_convention: NamingConvention,
    pub base_sha256: String,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub task_id: String,
    pub model_index: u64,
    pub source_kind: SourceKind,
    pub lora_scale: f32,
    pub delta_norm: f64,
}
