//! Low-rank adapters, densified into ordinary deltas at ingest.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorMap};

pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";
pub const LORA_SCALE_KEY: &str = "lora_scale";

/// Factors of one adapted layer: `Δ = scale · B · A` with `B: [m, r]`, `A: [r, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layers: BTreeMap<String, LoraFactors>,
    pub scale: f32,
}

impl LoraAdapter {
    pub fn new(scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("LoRA scale must be positive, got {scale}")));
        }
        Ok(Self {
            layers: BTreeMap::new(),
            scale,
        })
    }

    pub fn with_layer(mut self, name: impl Into<String>, a: Tensor, b: Tensor) -> Self {
        self.layers.insert(name.into(), LoraFactors { a, b });
        self
    }

    /// Reads `<layer>.lora_A` / `<layer>.lora_B` pairs; the scale comes from the
    /// `lora_scale` metadata entry (default 1).
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let scale = match map.metadata().get(LORA_SCALE_KEY) {
            Some(s) => s
                .parse::<f32>()
                .map_err(|e| Error::Config(format!("bad {LORA_SCALE_KEY} `{s}`: {e}")))?,
            None => 1.0,
        };
        let mut adapter = Self::new(scale)?;
        for (name, t) in map.iter() {
            if let Some(layer) = name.strip_suffix(LORA_A_SUFFIX) {
                let b_name = format!("{layer}{LORA_B_SUFFIX}");
                let b = map
                    .get(&b_name)
                    .ok_or_else(|| Error::mismatch(&b_name, "LoRA B factor missing"))?;
                adapter.layers.insert(
                    layer.to_string(),
                    LoraFactors {
                        a: t.clone(),
                        b: b.clone(),
                    },
                );
            } else if let Some(layer) = name.strip_suffix(LORA_B_SUFFIX) {
                if !map.contains(&format!("{layer}{LORA_A_SUFFIX}")) {
                    return Err(Error::mismatch(name, "LoRA A factor missing"));
                }
            } else {
                return Err(Error::mismatch(name, "not a LoRA factor name"));
            }
        }
        Ok(adapter)
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (layer, f) in &self.layers {
            map.insert(format!("{layer}{LORA_A_SUFFIX}"), f.a.clone())?;
            map.insert(format!("{layer}{LORA_B_SUFFIX}"), f.b.clone())?;
        }
        map.metadata_mut()
            .insert(LORA_SCALE_KEY.into(), self.scale.to_string());
        Ok(map)
    }

    /// True when every tensor name in `map` is a LoRA factor.
    pub fn looks_like_adapter(map: &TensorMap) -> bool {
        !map.is_empty()
            && map
                .names()
                .all(|n| n.ends_with(LORA_A_SUFFIX) || n.ends_with(LORA_B_SUFFIX))
    }

    /// Dense delta with the structure of `base`; layers without factors are zero.
    pub fn densify(&self, base: &TensorMap) -> Result<TensorMap> {
        let mut delta = base.zeros_like();
        for (layer, f) in &self.layers {
            let target = base
                .get(layer)
                .ok_or_else(|| Error::mismatch(layer, "LoRA layer absent from base"))?;
            let (m, n) = match target.shape() {
                [m, n] => (*m, *n),
                other => {
                    return Err(Error::mismatch(
                        layer,
                        format!("LoRA needs a 2-D base layer, found shape {other:?}"),
                    ))
                }
            };
            let (b_rows, rank) = match f.b.shape() {
                [rows, r] => (*rows, *r),
                other => return Err(Error::mismatch(layer, format!("B factor shape {other:?}"))),
            };
            if b_rows != m || f.a.shape() != [rank, n] {
                return Err(Error::mismatch(
                    layer,
                    format!(
                        "LoRA factors B{:?}·A{:?} do not produce base shape [{m}, {n}]",
                        f.b.shape(),
                        f.a.shape()
                    ),
                ));
            }
            let (a, b) = (f.a.data(), f.b.data());
            let scale = f64::from(self.scale);
            let out = delta.get_mut(layer).expect("zeros_like keeps names").data_mut();
            for i in 0..m {
                for j in 0..n {
                    let acc: f64 = (0..rank)
                        .map(|r| f64::from(b[i * rank + r]) * f64::from(a[r * n + j]))
                        .sum();
                    out[i * n + j] = (scale * acc) as f32;
                }
            }
        }
        Ok(delta)
    }
}
