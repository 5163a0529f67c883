//! Layer structure of a checkpoint: which tensors are input/output layers and
//! which form repeated per-block groups that can be shuffled across blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorMap;

/// Name-classification rules. Stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamingConvention {
    /// Regex with two capture groups: block index and layer type.
    pub block_pattern: String,
    pub input_pattern: String,
    pub output_pattern: String,
    /// Substring of a layer type that marks it as an MLP layer.
    pub mlp_marker: String,
    pub attn_marker: String,
}

impl Default for NamingConvention {
    fn default() -> Self {
        Self {
            block_pattern: r"^blocks\.(\d+)\.(.+)$".into(),
            input_pattern: r"^input\.".into(),
            output_pattern: r"^output\.".into(),
            mlp_marker: "mlp".into(),
            attn_marker: "attn".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoClass {
    Input,
    Output,
    Block,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerId {
    pub raw_name: String,
    /// Present exactly when `io_class == Block`.
    pub block_index: Option<u64>,
    /// Layer type within a block (`mlp.fc1`); the raw name for input/output layers.
    pub layer_type: String,
    pub io_class: IoClass,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSchema {
    /// All layers in lexicographic name order.
    pub layers: Vec<LayerId>,
    /// Number of distinct block indices.
    pub num_blocks: usize,
    /// Layer type → layer names ordered by block index.
    pub groups: BTreeMap<String, Vec<String>>,
    pub convention: NamingConvention,
}

impl ModelSchema {
    pub fn layer(&self, name: &str) -> Option<&LayerId> {
        self.layers
            .binary_search_by(|l| l.raw_name.as_str().cmp(name))
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn selector_universe(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn block_layers(&self) -> impl Iterator<Item = &LayerId> {
        self.layers.iter().filter(|l| l.io_class == IoClass::Block)
    }

    /// Checks that `map` carries every schema layer with the recorded shape.
    pub fn check_conforms(&self, map: &TensorMap) -> Result<()> {
        for layer in &self.layers {
            let t = map.require(&layer.raw_name)?;
            if t.shape() != layer.shape.as_slice() {
                return Err(Error::mismatch(
                    &layer.raw_name,
                    format!("expected shape {:?}, found {:?}", layer.shape, t.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn compile(pattern: &str, what: &str) -> Result<Regex> {
    Regex::new(pattern).map_err(|e| Error::Config(format!("bad {what} pattern `{pattern}`: {e}")))
}

/// Classifies every tensor of `checkpoint` and builds the shuffle groups.
///
/// Names matching neither the block, input nor output rule are classified as
/// output layers, so no transform ever touches them.
pub fn parse_schema(checkpoint: &TensorMap, convention: &NamingConvention) -> Result<ModelSchema> {
    let block_re = compile(&convention.block_pattern, "block")?;
    if block_re.captures_len() < 3 {
        return Err(Error::Config(format!(
            "block pattern `{}` needs two capture groups (index, type)",
            convention.block_pattern
        )));
    }
    let input_re = compile(&convention.input_pattern, "input")?;
    let output_re = compile(&convention.output_pattern, "output")?;

    let mut layers = Vec::with_capacity(checkpoint.len());
    let mut grouped: BTreeMap<String, BTreeMap<u64, String>> = BTreeMap::new();
    let mut blocks = BTreeSet::new();

    for (name, tensor) in checkpoint.iter() {
        let shape = tensor.shape().to_vec();
        let parsed = block_re.captures(name).and_then(|caps| {
            let index = caps.get(1)?.as_str().parse::<u64>().ok()?;
            Some((index, caps.get(2)?.as_str().to_string()))
        });
        let layer = if let Some((index, layer_type)) = parsed {
            let group = grouped.entry(layer_type.clone()).or_default();
            if let Some(prev) = group.insert(index, name.to_string()) {
                return Err(Error::Schema(format!(
                    "duplicate layer (block {index}, type `{layer_type}`): `{prev}` and `{name}`"
                )));
            }
            blocks.insert(index);
            LayerId {
                raw_name: name.to_string(),
                block_index: Some(index),
                layer_type,
                io_class: IoClass::Block,
                shape,
            }
        } else {
            let io_class = if input_re.is_match(name) {
                IoClass::Input
            } else {
                if !output_re.is_match(name) {
                    log::debug!("layer `{name}` matches no naming rule; treated as output");
                }
                IoClass::Output
            };
            LayerId {
                raw_name: name.to_string(),
                block_index: None,
                layer_type: name.to_string(),
                io_class,
                shape,
            }
        };
        layers.push(layer);
    }

    let mut groups = BTreeMap::new();
    for (layer_type, members) in grouped {
        let names: Vec<String> = members.into_values().collect();
        let shapes: BTreeSet<&[usize]> = names
            .iter()
            .map(|n| checkpoint.get(n).expect("name came from checkpoint").shape())
            .collect();
        if shapes.len() > 1 {
            return Err(Error::Schema(format!(
                "group `{layer_type}` mixes shapes {shapes:?} across layers {names:?}"
            )));
        }
        groups.insert(layer_type, names);
    }

    Ok(ModelSchema {
        layers,
        num_blocks: blocks.len(),
        groups,
        convention: convention.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorMode {
    All,
    Mlp,
    Attn,
    Custom,
}

impl fmt::Display for SelectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectorMode::All => "all",
            SelectorMode::Mlp => "mlp",
            SelectorMode::Attn => "attn",
            SelectorMode::Custom => "custom",
        })
    }
}

impl FromStr for SelectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(SelectorMode::All),
            "mlp" => Ok(SelectorMode::Mlp),
            "attn" => Ok(SelectorMode::Attn),
            "custom" => Ok(SelectorMode::Custom),
            other => Err(Error::Config(format!("unknown selector `{other}`"))),
        }
    }
}

/// Which block-class layers a transform touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSelector {
    pub mode: SelectorMode,
    /// Layer-type substrings, used by `custom` mode.
    #[serde(default)]
    pub patterns: Vec<String>,
    /// Keep positions `0, r, 2r, …` of each group.
    pub skip_rate: usize,
}

impl Default for TargetSelector {
    fn default() -> Self {
        Self::all()
    }
}

impl TargetSelector {
    pub fn all() -> Self {
        Self::with_mode(SelectorMode::All)
    }

    pub fn with_mode(mode: SelectorMode) -> Self {
        Self {
            mode,
            patterns: Vec::new(),
            skip_rate: 1,
        }
    }

    pub fn custom<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        Self {
            mode: SelectorMode::Custom,
            patterns: patterns.into_iter().map(Into::into).collect(),
            skip_rate: 1,
        }
    }

    pub fn skip(mut self, rate: usize) -> Self {
        self.skip_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.skip_rate == 0 {
            return Err(Error::Config("skip rate must be at least 1".into()));
        }
        Ok(())
    }

    fn matches_type(&self, layer_type: &str, convention: &NamingConvention) -> bool {
        match self.mode {
            SelectorMode::All => true,
            SelectorMode::Mlp => layer_type.contains(&convention.mlp_marker),
            SelectorMode::Attn => layer_type.contains(&convention.attn_marker),
            SelectorMode::Custom => self.patterns.iter().any(|p| layer_type.contains(p.as_str())),
        }
    }
}

/// Result of [`select_targets`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    /// Layer type → selected layer names in block order.
    pub groups: BTreeMap<String, Vec<String>>,
    /// Set when a selector matched nothing.
    pub warning: Option<String>,
}

impl Selection {
    /// Selected names: groups in type order, block order within a group.
    pub fn layers(&self) -> Vec<String> {
        self.groups.values().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn select_targets(schema: &ModelSchema, selector: &TargetSelector) -> Result<Selection> {
    selector.validate()?;
    let groups: BTreeMap<String, Vec<String>> = schema
        .groups
        .iter()
        .filter(|(ty, _)| selector.matches_type(ty, &schema.convention))
        .map(|(ty, names)| {
            let kept = names.iter().step_by(selector.skip_rate).cloned().collect();
            (ty.clone(), kept)
        })
        .collect();
    let warning = groups.is_empty().then(|| {
        let msg = format!(
            "selector {} {:?} matched no layer types",
            selector.mode, selector.patterns
        );
        log::warn!("{msg}");
        msg
    });
    Ok(Selection { groups, warning })
}
