//! Compress a suite of fine-tuned models into one store and retrieve each one.
//!
//! `cargo run --example compress_and_retrieve`

use randes::harness::{generate_tasks_with, ArchConfig, Split, TrainConfig};
use randes::superposition::{ModelInput, StoreConfig, SuperpositionStore};
use randes::transforms::TransformMode;

fn main() -> randes::Result<()> {
    let arch = ArchConfig {
        width: 16,
        blocks: 4,
        d_in: 8,
        d_out: 4,
    };
    let suite = generate_tasks_with(7, 4, &arch, &TrainConfig::default())?;

    let inputs = suite
        .task_ids()
        .into_iter()
        .zip(&suite.finetuned)
        .map(|(id, m)| ModelInput::full(id, m.clone()));
    let config = StoreConfig::new(TransformMode::Srsf).lambda(0.5);
    let store = SuperpositionStore::compress(suite.base.clone(), inputs, config)?;

    println!("{:<8} {:>10} {:>12} {:>10}", "task", "base", "fine-tuned", "retrieved");
    for (i, id) in suite.task_ids().iter().enumerate() {
        let retrieved = store.retrieve(id)?;
        println!(
            "{id:<8} {:>10.4} {:>12.4} {:>10.4}",
            suite.evaluate(&suite.base, i, Split::Test)?,
            suite.evaluate(&suite.finetuned[i], i, Split::Test)?,
            suite.evaluate(&retrieved, i, Split::Test)?,
        );
    }
    println!("{} models share {} parameters", store.registry().len(), store.multi_delta().numel());
    Ok(())
}
