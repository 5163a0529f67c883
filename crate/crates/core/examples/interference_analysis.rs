//! Measure retrieval-time interference with and without random transforms.
//!
//! `cargo run --example interference_analysis`

use randes::analysis::{layer_cosine_distributions, pairwise_cosine_stats, InterferenceReport};
use randes::harness::{generate_tasks_with, ArchConfig, TrainConfig};
use randes::superposition::{ModelInput, StoreConfig, SuperpositionStore};
use randes::transforms::{MaterializedTransform, TransformMode};

fn main() -> randes::Result<()> {
    let arch = ArchConfig {
        width: 16,
        blocks: 4,
        d_in: 8,
        d_out: 4,
    };
    let suite = generate_tasks_with(3, 6, &arch, &TrainConfig::default())?;
    let ids = suite.task_ids();
    let deltas = suite.deltas()?;

    for mode in [TransformMode::Identity, TransformMode::Shuffle, TransformMode::Rsf, TransformMode::Srsf] {
        let inputs = ids.iter().zip(&suite.finetuned).map(|(id, m)| ModelInput::full(id, m.clone()));
        let store = SuperpositionStore::compress(suite.base.clone(), inputs, StoreConfig::new(mode))?;
        let transforms: Vec<MaterializedTransform> =
            ids.iter().map(|id| store.transform_for(id)).collect::<randes::Result<_>>()?;

        let reports = InterferenceReport::compute_all(&ids, &deltas, &transforms, 1.0)?;
        let mean_norm = reports.iter().map(|r| r.direct_norm).sum::<f64>() / reports.len() as f64;
        let worst_gap = reports.iter().map(InterferenceReport::relative_gap).fold(0.0, f64::max);
        let cos = pairwise_cosine_stats(&deltas, Some(&transforms))?.summary;
        println!(
            "{:<9} mean interference {mean_norm:.4}  mean |cos| {:.4}  max |cos| {:.4}  expansion gap {worst_gap:.1e}",
            mode.as_str(),
            cos.mean_abs,
            cos.max_abs
        );
    }

    let schema = randes::schema::parse_schema(&suite.base, &Default::default())?;
    for (group, c) in layer_cosine_distributions(&deltas, &schema)? {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "{group}: within-model cos {:.3}, across-model cos {:.3}",
            mean(&c.within_model),
            mean(&c.across_models)
        );
    }
    Ok(())
}
