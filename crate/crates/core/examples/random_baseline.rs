//! Regenerates `tests/data/random_baseline.json`: the best surrogate reward
//! found by scoring 10,000 uniformly random layer nets at 32x32x3 under a
//! 10^5 parameter budget.
//!
//! cargo run --release -p morphnas --example random_baseline

use morphnas::arch::{Mode, RandomLimits, Shape};
use morphnas::baseline::random_baseline;
use morphnas::resources::{ConstraintSet, ConstraintSpec, Metric};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cs = ConstraintSet(vec![ConstraintSpec::upper(Metric::ModelSize, 1e5)]);
    let b = random_baseline(0, Mode::LayerNet, &RandomLimits::default(), Shape::new(32, 32, 3), &cs, 10_000)?;
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/random_baseline.json");
    std::fs::write(&path, serde_json::to_string_pretty(&b)? + "\n")?;
    println!("best reward {} ({} params, {} draws)", b.best_reward, b.best_params, b.draws);
    Ok(())
}
