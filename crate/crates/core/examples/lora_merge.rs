//! Store low-rank adapters next to full fine-tunes.
//!
//! `cargo run --example lora_merge`

use randes::rng::SplitMix64;
use randes::superposition::{LoraAdapter, ModelInput, StoreConfig, SuperpositionStore};
use randes::tensor::{self, Tensor, TensorMap};

fn random(shape: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor {
    let n = shape.iter().product();
    // Quarter steps keep every product exactly representable.
    let data = (0..n).map(|_| ((rng.standard_normal() * scale * 4.0).round() / 4.0) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("sizes match")
}

fn main() -> randes::Result<()> {
    let mut rng = SplitMix64::new(5);
    let mut base = TensorMap::new();
    for k in 0..3 {
        base.insert(format!("blocks.{k}.attn.weight"), random(&[8, 8], &mut rng, 1.0))?;
        base.insert(format!("blocks.{k}.mlp.weight"), random(&[16, 8], &mut rng, 1.0))?;
    }

    let mut adapter = LoraAdapter::new(0.5)?;
    for k in 0..3 {
        let name = format!("blocks.{k}.mlp.weight");
        adapter = adapter.with_layer(name, random(&[2, 8], &mut rng, 1.0), random(&[16, 2], &mut rng, 1.0));
    }
    let full = tensor::add(&base, &tensor::scale(0.25, &base))?;

    let store = SuperpositionStore::compress(
        base.clone(),
        [ModelInput::full("full", full), ModelInput::lora("adapter", adapter.clone())],
        StoreConfig::default().lambda(1.0),
    )?;
    for entry in store.registry() {
        println!("{} ({:?}, scale {}) |Δ| = {:.3}", entry.task_id, entry.source_kind, entry.lora_scale, entry.delta_norm);
    }

    let merged = tensor::add(&base, &adapter.densify(&base)?)?;
    let retrieved = store.retrieve("adapter")?;
    let err = tensor::frobenius_norm(&tensor::sub(&retrieved, &merged)?);
    println!("adapter retrieved with interference {err:.3} from the full fine-tune");
    Ok(())
}
