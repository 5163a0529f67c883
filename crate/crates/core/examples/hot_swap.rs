//! Add and remove models from a live store without touching the others.
//!
//! `cargo run --example hot_swap`

use randes::harness::{generate_tasks_with, ArchConfig, TrainConfig};
use randes::superposition::{ModelInput, ModelSource, StoreConfig, SuperpositionStore};
use randes::{checkpoint, tensor};

fn main() -> randes::Result<()> {
    let arch = ArchConfig {
        width: 12,
        blocks: 3,
        d_in: 6,
        d_out: 3,
    };
    let suite = generate_tasks_with(11, 5, &arch, &TrainConfig::default())?;
    let ids = suite.task_ids();

    let mut store = SuperpositionStore::empty(suite.base.clone(), StoreConfig::default().lambda(0.5))?;
    for (id, model) in ids.iter().zip(&suite.finetuned) {
        let entry = store.add_model(ModelInput::full(id, model.clone()))?.clone();
        let payload = checkpoint::encode(store.multi_delta())?.len();
        println!(
            "added {id} as model {} (|Δ| = {:.4}); payload {payload} bytes",
            entry.model_index, entry.delta_norm
        );
    }

    let before = store.retrieve(&ids[0])?;
    let removed = store.remove_model(&ids[2], &ModelSource::Full(suite.finetuned[2].clone()))?;
    println!("removed {}; remaining {:?}", removed.task_id, store.task_ids().collect::<Vec<_>>());

    // Other tasks now see one less interfering term.
    let after = store.retrieve(&ids[0])?;
    let change = tensor::frobenius_norm(&tensor::sub(&after, &before)?);
    println!("{} moved by {change:.4} after the removal", ids[0]);

    let readded = store.add_model(ModelInput::full(&ids[2], suite.finetuned[2].clone()))?;
    println!("re-added {} with a fresh index {}", readded.task_id, readded.model_index);
    Ok(())
}
