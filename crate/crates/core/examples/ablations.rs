//! One-axis ablations: transform mode, context, skip rate and layer selector.
//!
//! `cargo run --release --example ablations`

use randes::harness::{generate_tasks_with, run_ablation, ArchConfig, SweepAxis, TrainConfig};
use randes::superposition::StoreConfig;

fn main() -> randes::Result<()> {
    let arch = ArchConfig {
        width: 16,
        blocks: 4,
        d_in: 8,
        d_out: 4,
    };
    let suite = generate_tasks_with(42, 6, &arch, &TrainConfig::default())?;
    let axes: [(SweepAxis, &[&str]); 4] = [
        (SweepAxis::Mode, &["identity", "shuffle", "shift", "rsf", "srsf", "rd"]),
        (SweepAxis::Context, &["none", "rbd", "rd"]),
        (SweepAxis::SkipRate, &["1", "2", "3", "4"]),
        (SweepAxis::Selector, &["all", "mlp", "attn"]),
    ];
    for (axis, settings) in axes {
        let settings: Vec<String> = settings.iter().map(|s| s.to_string()).collect();
        let result = run_ablation(&suite, axis, &settings, &StoreConfig::default(), Some(0.5))?;
        println!("{}:", axis.as_str());
        for p in &result.points {
            println!(
                "  {:<9} metric {:>9.3}  |cos| {:.4}  layers {}",
                p.setting, p.avg_metric, p.mean_abs_cosine, p.selected_layers
            );
        }
    }
    Ok(())
}
