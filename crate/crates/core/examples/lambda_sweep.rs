//! Grid-search the scaling coefficient λ and write the curves as CSV.
//!
//! `cargo run --release --example lambda_sweep [out_dir]`

use std::path::PathBuf;

use randes::harness::{default_lambda_grid, generate_tasks, grid_search_lambda, ArchConfig};
use randes::superposition::StoreConfig;
use randes::transforms::TransformMode;

fn main() -> randes::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;
    let suite = generate_tasks(42, 8, &ArchConfig::default())?;
    let reference = suite.reference_metrics()?;
    println!("base {:.3}, fine-tuned {:.3}", reference.base_test, reference.finetuned_test);

    for mode in [TransformMode::Identity, TransformMode::Srsf] {
        let curve = grid_search_lambda(&suite, &StoreConfig::new(mode), &default_lambda_grid())?;
        for p in &curve.points {
            println!(
                "{:<9} λ={:<4} val {:>8.3} test {:>8.3} interference {:.3}",
                mode.as_str(),
                p.setting,
                p.avg_val_metric,
                p.avg_metric,
                p.interference_norm
            );
        }
        let path = out.join(format!("lambda_{}.csv", mode.as_str()));
        std::fs::write(&path, curve.to_csv())?;
        println!("best λ for {}: {} -> {}", mode.as_str(), curve.argbest, path.display());
    }
    Ok(())
}
