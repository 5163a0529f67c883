//! Inspect the seeded per-model transforms and check that they invert.
//!
//! `cargo run --example transforms`

use randes::rng::SplitMix64;
use randes::schema::{parse_schema, NamingConvention, TargetSelector};
use randes::tensor::{Tensor, TensorMap};
use randes::transforms::{materialize, DeltaTransform, TransformMode, TransformSpec};

fn main() -> randes::Result<()> {
    let mut rng = SplitMix64::new(9);
    let mut delta = TensorMap::new();
    for k in 0..4 {
        for ty in ["attn.weight", "mlp.weight"] {
            let data = (0..12).map(|_| rng.standard_normal() as f32).collect();
            delta.insert(format!("blocks.{k}.{ty}"), Tensor::new(vec![3, 4], data)?)?;
        }
    }
    let schema = parse_schema(&delta, &NamingConvention::default())?;

    for mode in TransformMode::ORTHOGONAL {
        for model_index in 0..2 {
            let spec = TransformSpec::new(mode, 42, model_index, TargetSelector::all());
            let t = materialize(&spec, &schema)?;
            let exact = t.apply_inverse(&t.apply(&delta)?)?.bit_eq(&delta);
            println!("{} model {model_index} (seed {}): round trip exact {exact}", mode.as_str(), spec.effective_seed());
            if let Some(p) = t.permutations.get("mlp.weight") {
                println!("  mlp order {:?}", p.permuted_order());
            }
            if let Some(s) = t.signs.get("blocks.0.attn.weight") {
                println!("  blocks.0.attn.weight column signs {s:?}");
            }
        }
    }

    let mlp_only = TargetSelector::custom(["mlp"]).skip(2);
    let t = materialize(&TransformSpec::new(TransformMode::Srsf, 42, 0, mlp_only), &schema)?;
    println!("custom selector touches {:?}", t.signs.keys().collect::<Vec<_>>());
    Ok(())
}
