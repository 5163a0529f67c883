//! Write checkpoints, save a store to disk, reload it and verify retrieval.
//!
//! `cargo run --example persist_store`

use randes::checkpoint;
use randes::harness::{generate_tasks_with, ArchConfig, TrainConfig};
use randes::superposition::{ModelInput, StoreConfig, SuperpositionStore};

fn main() -> randes::Result<()> {
    let dir = std::env::temp_dir().join(format!("randes-persist-{}", std::process::id()));
    let arch = ArchConfig {
        width: 8,
        blocks: 2,
        d_in: 4,
        d_out: 2,
    };
    let suite = generate_tasks_with(1, 1, &arch, &TrainConfig::default())?;
    let base_path = dir.join("base.rdck");
    std::fs::create_dir_all(&dir)?;
    checkpoint::write(&base_path, &suite.base)?;

    // With one model and λ = 1 retrieval is exact.
    let store = SuperpositionStore::compress(
        suite.base.clone(),
        [ModelInput::full("only", suite.finetuned[0].clone())],
        StoreConfig::default(),
    )?;
    let files = store.save(dir.join("store"))?;
    println!(
        "store: {} + {} bytes; checkpoint {} bytes",
        files.multi_delta_bytes,
        files.manifest_bytes,
        checkpoint::encode(&suite.finetuned[0])?.len()
    );

    let loaded = SuperpositionStore::load_with_base_file(dir.join("store"), &base_path)?;
    let model = loaded.retrieve("only")?;
    println!("base sha256 {}", loaded.base_sha256());
    println!("bit-exact after reload: {}", model.bit_eq(&suite.finetuned[0]));
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
