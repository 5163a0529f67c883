//! Seeded, layer-wise orthogonal transforms on deltas.
//!
//! A transform is never stored as a matrix. A [`TransformSpec`] (mode, global
//! seed, model index, selector) is expanded against a [`ModelSchema`] into a
//! [`MaterializedTransform`]: per-group permutations over block positions and
//! per-layer column sign (or diagonal) vectors. Applying one is pure data
//! movement plus sign-bit flips, so for every orthogonal mode the round trip
//! `apply_inverse(apply(x))` is bit-exact.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::schema::{select_targets, ModelSchema, TargetSelector};
use crate::tensor::{Tensor, TensorMap};

/// Diagonal entries below this magnitude cannot be inverted.
pub const MIN_DIAGONAL_MAGNITUDE: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    Identity,
    /// Random permutation of same-type layers across blocks.
    Shuffle,
    /// Deterministic cyclic shift across blocks.
    Shift,
    /// Random column-wise sign flips (random binary diagonal context).
    Rsf,
    /// Shuffle followed by sign flips.
    Srsf,
    /// Random normal diagonal; not orthogonal, ablation only.
    Rd,
}

impl TransformMode {
    pub const ALL: [TransformMode; 6] = [
        TransformMode::Identity,
        TransformMode::Shuffle,
        TransformMode::Shift,
        TransformMode::Rsf,
        TransformMode::Srsf,
        TransformMode::Rd,
    ];

    pub const ORTHOGONAL: [TransformMode; 5] = [
        TransformMode::Identity,
        TransformMode::Shuffle,
        TransformMode::Shift,
        TransformMode::Rsf,
        TransformMode::Srsf,
    ];

    pub fn is_orthogonal(self) -> bool {
        self != TransformMode::Rd
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransformMode::Identity => "identity",
            TransformMode::Shuffle => "shuffle",
            TransformMode::Shift => "shift",
            TransformMode::Rsf => "rsf",
            TransformMode::Srsf => "srsf",
            TransformMode::Rd => "rd",
        }
    }

    fn permutes(self) -> bool {
        matches!(
            self,
            TransformMode::Shuffle | TransformMode::Shift | TransformMode::Srsf
        )
    }

    fn flips_signs(self) -> bool {
        matches!(self, TransformMode::Rsf | TransformMode::Srsf)
    }
}

impl fmt::Display for TransformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformMode {
    type Err = Error;

    /// Accepts the six mode names plus `shuffle+rsf` (= `srsf`). Any `+`
    /// combination involving `rd` is rejected: the normal diagonal has no
    /// composed variant.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower.contains('+') {
            let mut parts: Vec<&str> = lower.split('+').map(str::trim).collect();
            parts.sort_unstable();
            parts.dedup();
            if parts.contains(&"rd") {
                return Err(Error::InvalidSpec(format!(
                    "`{s}`: rd cannot be combined with other transforms"
                )));
            }
            return match parts.as_slice() {
                ["rsf", "shuffle"] | ["rsf", "srsf"] | ["shuffle", "srsf"] => Ok(TransformMode::Srsf),
                [single] => single.parse(),
                _ => Err(Error::InvalidSpec(format!("unsupported combination `{s}`"))),
            };
        }
        match lower.as_str() {
            "identity" | "ta" => Ok(TransformMode::Identity),
            "shuffle" => Ok(TransformMode::Shuffle),
            "shift" => Ok(TransformMode::Shift),
            "rsf" | "rbd" => Ok(TransformMode::Rsf),
            "srsf" => Ok(TransformMode::Srsf),
            "rd" => Ok(TransformMode::Rd),
            _ => Err(Error::InvalidSpec(format!("unknown transform mode `{s}`"))),
        }
    }
}

/// Everything needed to regenerate one model's transform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformSpec {
    pub mode: TransformMode,
    pub global_seed: u64,
    pub model_index: u64,
    pub selector: TargetSelector,
}

impl TransformSpec {
    pub fn new(mode: TransformMode, global_seed: u64, model_index: u64, selector: TargetSelector) -> Self {
        Self {
            mode,
            global_seed,
            model_index,
            selector,
        }
    }

    pub fn effective_seed(&self) -> u64 {
        self.global_seed.wrapping_add(self.model_index)
    }
}

/// Permutation of one layer group over its selected block positions.
///
/// Forward application moves the tensor at slot `sigma[p]` into slot `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPermutation {
    pub layers: Vec<String>,
    pub sigma: Vec<usize>,
}

impl GroupPermutation {
    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(p, &s)| p == s)
    }

    /// Layer names in the order their contents occupy after forward application.
    pub fn permuted_order(&self) -> Vec<&str> {
        self.sigma.iter().map(|&s| self.layers[s].as_str()).collect()
    }

    /// Contents order after applying the inverse permutation.
    pub fn inverse_order(&self) -> Vec<&str> {
        let mut out = vec![""; self.layers.len()];
        for (p, &s) in self.sigma.iter().enumerate() {
            out[s] = self.layers[p].as_str();
        }
        out
    }
}

/// A transform expanded against a schema. Immutable and shareable.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedTransform {
    pub mode: TransformMode,
    /// Layer type → permutation (shuffle, shift, srsf).
    pub permutations: BTreeMap<String, GroupPermutation>,
    /// Layer name → one ±1 per column (rsf, srsf).
    pub signs: BTreeMap<String, Vec<i8>>,
    /// Layer name → one normal draw per column (rd).
    pub diagonals: BTreeMap<String, Vec<f32>>,
}

/// Anything that maps deltas forward and back.
pub trait DeltaTransform {
    fn apply(&self, delta: &TensorMap) -> Result<TensorMap>;
    fn apply_inverse(&self, x: &TensorMap) -> Result<TensorMap>;
}

/// Number of columns a per-column vector needs for a tensor of this shape.
fn column_count(shape: &[usize]) -> usize {
    *shape.last().expect("schema layers have rank >= 1")
}

/// Expands `spec` against `schema` through the pinned PRNG pipeline.
pub fn materialize(spec: &TransformSpec, schema: &ModelSchema) -> Result<MaterializedTransform> {
    let selection = select_targets(schema, &spec.selector)?;
    let seed = spec.effective_seed();
    let mut out = MaterializedTransform {
        mode: spec.mode,
        permutations: BTreeMap::new(),
        signs: BTreeMap::new(),
        diagonals: BTreeMap::new(),
    };

    if spec.mode.permutes() {
        for (layer_type, layers) in &selection.groups {
            let n = layers.len();
            let sigma = if spec.mode == TransformMode::Shift {
                let shift = ((spec.model_index % n as u64) as usize + 1) % n;
                (0..n).map(|p| (p + n - shift) % n).collect()
            } else {
                SplitMix64::for_stream(seed, "perm", layer_type).permutation(n)
            };
            out.permutations.insert(
                layer_type.clone(),
                GroupPermutation {
                    layers: layers.clone(),
                    sigma,
                },
            );
        }
    }

    let layer_cols = |name: &str| -> Result<usize> {
        schema
            .layer(name)
            .map(|l| column_count(&l.shape))
            .ok_or_else(|| Error::mismatch(name, "selected layer missing from schema"))
    };

    if spec.mode.flips_signs() {
        for name in selection.layers() {
            let cols = layer_cols(&name)?;
            let signs = SplitMix64::for_stream(seed, "sign", &name).signs(cols);
            out.signs.insert(name, signs);
        }
    }

    if spec.mode == TransformMode::Rd {
        for name in selection.layers() {
            let cols = layer_cols(&name)?;
            let mut rng = SplitMix64::for_stream(seed, "diag", &name);
            let diag = (0..cols).map(|_| rng.standard_normal() as f32).collect();
            out.diagonals.insert(name, diag);
        }
    }

    Ok(out)
}

impl MaterializedTransform {
    pub fn identity() -> Self {
        Self {
            mode: TransformMode::Identity,
            permutations: BTreeMap::new(),
            signs: BTreeMap::new(),
            diagonals: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.permutations.is_empty() && self.signs.is_empty() && self.diagonals.is_empty()
    }

    fn check_conforms(&self, x: &TensorMap) -> Result<()> {
        for perm in self.permutations.values() {
            let first = x.require(&perm.layers[0])?.shape();
            for name in &perm.layers[1..] {
                let shape = x.require(name)?.shape();
                if shape != first {
                    return Err(Error::mismatch(
                        name,
                        format!("shape {shape:?} differs from group shape {first:?}"),
                    ));
                }
            }
        }
        let vectors = self
            .signs
            .iter()
            .map(|(k, v)| (k, v.len()))
            .chain(self.diagonals.iter().map(|(k, v)| (k, v.len())));
        for (name, len) in vectors {
            let cols = column_count(x.require(name)?.shape());
            if cols != len {
                return Err(Error::mismatch(
                    name,
                    format!("transform has {len} columns, tensor has {cols}"),
                ));
            }
        }
        Ok(())
    }

    fn permute(&self, x: &mut TensorMap, inverse: bool) {
        for perm in self.permutations.values() {
            if perm.is_identity() {
                continue;
            }
            let src: Vec<Tensor> = perm
                .layers
                .iter()
                .map(|n| x.get(n).expect("conformance checked").clone())
                .collect();
            for (p, &s) in perm.sigma.iter().enumerate() {
                if inverse {
                    x.replace(&perm.layers[s], src[p].clone());
                } else {
                    x.replace(&perm.layers[p], src[s].clone());
                }
            }
        }
    }

    fn flip_signs(&self, x: &mut TensorMap) {
        for (name, signs) in &self.signs {
            let t = x.get_mut(name).expect("conformance checked");
            let cols = t.cols();
            for row in t.data_mut().chunks_exact_mut(cols) {
                for (v, &s) in row.iter_mut().zip(signs) {
                    if s < 0 {
                        *v = -*v;
                    }
                }
            }
        }
    }

    fn scale_columns(&self, x: &mut TensorMap, inverse: bool) -> Result<()> {
        for (name, diag) in &self.diagonals {
            if inverse {
                if let Some(c) = diag.iter().position(|d| d.abs() < MIN_DIAGONAL_MAGNITUDE) {
                    return Err(Error::NumericalDegeneracy(format!(
                        "diagonal entry {} of `{name}` (column {c}) is not invertible",
                        diag[c]
                    )));
                }
            }
            let t = x.get_mut(name).expect("conformance checked");
            let cols = t.cols();
            for row in t.data_mut().chunks_exact_mut(cols) {
                for (v, &d) in row.iter_mut().zip(diag) {
                    if inverse {
                        *v /= d;
                    } else {
                        *v *= d;
                    }
                }
            }
        }
        Ok(())
    }
}

impl DeltaTransform for MaterializedTransform {
    fn apply(&self, delta: &TensorMap) -> Result<TensorMap> {
        self.check_conforms(delta)?;
        let mut out = delta.clone();
        self.permute(&mut out, false);
        self.flip_signs(&mut out);
        self.scale_columns(&mut out, false)?;
        Ok(out)
    }

    fn apply_inverse(&self, x: &TensorMap) -> Result<TensorMap> {
        self.check_conforms(x)?;
        let mut out = x.clone();
        self.scale_columns(&mut out, true)?;
        self.flip_signs(&mut out);
        self.permute(&mut out, true);
        Ok(out)
    }
}

impl<T: DeltaTransform + ?Sized> DeltaTransform for &T {
    fn apply(&self, delta: &TensorMap) -> Result<TensorMap> {
        (**self).apply(delta)
    }

    fn apply_inverse(&self, x: &TensorMap) -> Result<TensorMap> {
        (**self).apply_inverse(x)
    }
}

/// `second ∘ first`: applies `first`, then `second`.
#[derive(Debug, Clone)]
pub struct Composed<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: DeltaTransform, B: DeltaTransform> DeltaTransform for Composed<A, B> {
    fn apply(&self, delta: &TensorMap) -> Result<TensorMap> {
        self.second.apply(&self.first.apply(delta)?)
    }

    fn apply_inverse(&self, x: &TensorMap) -> Result<TensorMap> {
        self.first.apply_inverse(&self.second.apply_inverse(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{parse_schema, NamingConvention, SelectorMode};
    use crate::tensor::frobenius_norm;

    fn schema_of(m: &TensorMap) -> ModelSchema {
        parse_schema(m, &NamingConvention::default()).unwrap()
    }

    fn filled(shape: &[usize], start: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| start + i as f32).collect()).unwrap()
    }

    fn three_blocks() -> TensorMap {
        let mut m = TensorMap::new();
        for k in 1..=3 {
            m.insert(format!("blocks.{k}.w"), filled(&[2, 2], 10.0 * k as f32)).unwrap();
        }
        m
    }

    fn spec(mode: TransformMode, seed: u64, index: u64) -> TransformSpec {
        TransformSpec::new(mode, seed, index, TargetSelector::all())
    }

    #[test]
    fn identity_materializes_empty() {
        let m = three_blocks();
        let t = materialize(&spec(TransformMode::Identity, 42, 0), &schema_of(&m)).unwrap();
        assert!(t.is_empty());
        assert!(t.apply(&m).unwrap().bit_eq(&m));
    }

    #[test]
    fn shift_moves_one_block_deeper_with_wrap() {
        let m = three_blocks();
        let t = materialize(&spec(TransformMode::Shift, 42, 0), &schema_of(&m)).unwrap();
        let perm = &t.permutations["w"];
        assert_eq!(perm.permuted_order(), ["blocks.3.w", "blocks.1.w", "blocks.2.w"]);
        assert_eq!(perm.inverse_order(), ["blocks.2.w", "blocks.3.w", "blocks.1.w"]);

        let out = t.apply(&m).unwrap();
        assert!(out.get("blocks.1.w").unwrap().bit_eq(m.get("blocks.3.w").unwrap()));
        assert!(out.get("blocks.2.w").unwrap().bit_eq(m.get("blocks.1.w").unwrap()));
        let inv = t.apply_inverse(&m).unwrap();
        assert!(inv.get("blocks.1.w").unwrap().bit_eq(m.get("blocks.2.w").unwrap()));
    }

    #[test]
    fn shift_amount_depends_on_model_index() {
        let m = three_blocks();
        let s = schema_of(&m);
        let orders: Vec<Vec<String>> = (0..3)
            .map(|i| {
                let t = materialize(&spec(TransformMode::Shift, 0, i), &s).unwrap();
                t.permutations["w"].permuted_order().iter().map(|x| x.to_string()).collect()
            })
            .collect();
        assert_ne!(orders[0], orders[1]);
        assert_ne!(orders[1], orders[2]);
        // index 2 shifts by 3 ≡ 0 positions
        assert_eq!(orders[2], ["blocks.1.w", "blocks.2.w", "blocks.3.w"]);
    }

    #[test]
    fn explicit_sign_flip() {
        let mut m = TensorMap::new();
        m.insert("blocks.1.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut t = MaterializedTransform::identity();
        t.mode = TransformMode::Rsf;
        t.signs.insert("blocks.1.w".into(), vec![1, -1]);
        let out = t.apply(&m).unwrap();
        assert_eq!(out.get("blocks.1.w").unwrap().data(), &[1.0, -2.0, 3.0, -4.0]);
        // D⁻¹ = D
        assert!(t.apply_inverse(&m).unwrap().bit_eq(&out));

        t.signs.insert("blocks.1.w".into(), vec![1, 1]);
        assert!(t.apply(&m).unwrap().bit_eq(&m));
    }

    #[test]
    fn vector_layers_flip_elementwise() {
        let mut m = TensorMap::new();
        m.insert("blocks.1.b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut t = MaterializedTransform::identity();
        t.signs.insert("blocks.1.b".into(), vec![-1, 1, -1]);
        assert_eq!(t.apply(&m).unwrap().get("blocks.1.b").unwrap().data(), &[-1.0, 2.0, -3.0]);
    }

    // Golden value of the pinned pipeline; changing it breaks stored manifests.
    #[test]
    fn rsf_seed_42_golden_signs() {
        let mut m = TensorMap::new();
        m.insert("blocks.1.w", Tensor::zeros(&[3, 2])).unwrap();
        m.insert("blocks.1.v", Tensor::zeros(&[3, 70])).unwrap();
        let s = schema_of(&m);
        let a = materialize(&spec(TransformMode::Rsf, 42, 0), &s).unwrap();
        let b = materialize(&spec(TransformMode::Rsf, 42, 0), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.signs["blocks.1.w"], GOLDEN_SIGNS_2COL);
        let wide: String = a.signs["blocks.1.v"]
            .iter()
            .map(|&s| if s < 0 { '-' } else { '+' })
            .collect();
        assert_eq!(wide, GOLDEN_SIGNS_70COL);
    }

    #[test]
    fn shuffle_seed_42_golden_permutation() {
        let mut m = TensorMap::new();
        for k in 1..=6 {
            m.insert(format!("blocks.{k}.mlp.fc"), Tensor::zeros(&[2, 2])).unwrap();
        }
        let t = materialize(&spec(TransformMode::Shuffle, 42, 1), &schema_of(&m)).unwrap();
        assert_eq!(t.permutations["mlp.fc"].sigma, GOLDEN_SIGMA_6);
    }

    // Frozen from an independent Python implementation of the pipeline.
    const GOLDEN_SIGNS_2COL: [i8; 2] = [1, 1];
    const GOLDEN_SIGNS_70COL: &str =
        "+-+-+-+-+-++-++--++++-+-++--++-+--+++++++--+++-+------+---++--+-++-++-";
    const GOLDEN_SIGMA_6: [usize; 6] = [2, 3, 5, 1, 0, 4];

    #[test]
    fn srsf_is_shuffle_then_flip() {
        let mut m = TensorMap::new();
        for k in 1..=4 {
            m.insert(format!("blocks.{k}.w"), filled(&[3, 5], k as f32 * 100.0)).unwrap();
        }
        let s = schema_of(&m);
        let srsf = materialize(&spec(TransformMode::Srsf, 9, 2), &s).unwrap();
        let shuffle = materialize(&spec(TransformMode::Shuffle, 9, 2), &s).unwrap();
        let rsf = materialize(&spec(TransformMode::Rsf, 9, 2), &s).unwrap();
        let composed = Composed {
            first: &shuffle,
            second: &rsf,
        };
        assert!(srsf.apply(&m).unwrap().bit_eq(&composed.apply(&m).unwrap()));
        assert!(srsf
            .apply_inverse(&m)
            .unwrap()
            .bit_eq(&composed.apply_inverse(&m).unwrap()));
    }

    #[test]
    fn unselected_layers_untouched() {
        let mut m = TensorMap::new();
        m.insert("input.embed", filled(&[2, 3], 1.0)).unwrap();
        for k in 1..=4 {
            m.insert(format!("blocks.{k}.mlp.fc"), filled(&[2, 3], 10.0 * k as f32)).unwrap();
            m.insert(format!("blocks.{k}.attn.q"), filled(&[2, 3], -10.0 * k as f32)).unwrap();
        }
        let s = schema_of(&m);
        let sel = TargetSelector::with_mode(SelectorMode::Mlp);
        let t = materialize(&TransformSpec::new(TransformMode::Srsf, 5, 0, sel), &s).unwrap();
        let out = t.apply(&m).unwrap();
        for name in ["input.embed", "blocks.1.attn.q", "blocks.3.attn.q"] {
            assert!(out.get(name).unwrap().bit_eq(m.get(name).unwrap()), "{name}");
        }
    }

    #[test]
    fn missing_layer_is_structural_error() {
        let m = three_blocks();
        let t = materialize(&spec(TransformMode::Srsf, 1, 0), &schema_of(&m)).unwrap();
        let mut partial = TensorMap::new();
        partial.insert("blocks.1.w", filled(&[2, 2], 0.0)).unwrap();
        assert!(matches!(t.apply(&partial), Err(Error::StructuralMismatch { .. })));
    }

    #[test]
    fn rd_inverse_rejects_tiny_diagonal() {
        let m = three_blocks();
        let mut t = materialize(&spec(TransformMode::Rd, 3, 0), &schema_of(&m)).unwrap();
        t.diagonals.get_mut("blocks.2.w").unwrap()[1] = 1e-13;
        assert!(t.apply(&m).is_ok());
        assert!(matches!(t.apply_inverse(&m), Err(Error::NumericalDegeneracy(_))));
    }

    #[test]
    fn rd_does_not_preserve_norm() {
        let m = three_blocks();
        let t = materialize(&spec(TransformMode::Rd, 42, 0), &schema_of(&m)).unwrap();
        let before = frobenius_norm(&m);
        let after = frobenius_norm(&t.apply(&m).unwrap());
        assert!((before - after).abs() / before > 1e-3, "{before} vs {after}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("SRSF".parse::<TransformMode>().unwrap(), TransformMode::Srsf);
        assert_eq!("shuffle+rsf".parse::<TransformMode>().unwrap(), TransformMode::Srsf);
        assert_eq!("rbd".parse::<TransformMode>().unwrap(), TransformMode::Rsf);
        assert!(matches!("srsf+rd".parse::<TransformMode>(), Err(Error::InvalidSpec(_))));
        assert!(matches!("rd+shuffle".parse::<TransformMode>(), Err(Error::InvalidSpec(_))));
        assert!("bogus".parse::<TransformMode>().is_err());
        for mode in TransformMode::ALL {
            assert_eq!(mode.as_str().parse::<TransformMode>().unwrap(), mode);
        }
    }

    #[test]
    fn effective_seed_wraps() {
        let s = TransformSpec::new(TransformMode::Rsf, u64::MAX, 2, TargetSelector::all());
        assert_eq!(s.effective_seed(), 1);
    }
}
