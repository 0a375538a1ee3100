//! Uniform random search, the reference point for judging a policy search.

use crate::arch::{expand_stack, random_architecture, Architecture, Mode, RandomLimits, Shape};
use crate::evaluation::surrogate::surrogate_performance;
use crate::resources::{estimate, reward, violations, ConstraintSet, ResourceError};
use crate::seed;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub seed: u64,
    pub mode: Mode,
    pub input: Shape,
    pub constraints: ConstraintSet,
    /// Architectures scored; draws that cannot be lowered at `input` are
    /// skipped and not counted.
    pub samples: usize,
    pub draws: u64,
    pub best_reward: f64,
    pub best_params: u64,
    pub best_satisfied: bool,
    /// Best reward among samples within every constraint.
    pub best_feasible_reward: Option<f64>,
    pub best_architecture: Architecture,
}

/// Scores `samples` random architectures with the surrogate. Draw `i` uses
/// `seed::derive(root, "baseline", [i])`.
pub fn random_baseline(
    root: u64,
    mode: Mode,
    limits: &RandomLimits,
    input: Shape,
    constraints: &ConstraintSet,
    samples: usize,
) -> Result<RandomBaseline, ResourceError> {
    let mut best: Option<(f64, u64, bool, Architecture)> = None;
    let mut best_feasible: Option<f64> = None;
    let (mut scored, mut draws) = (0usize, 0u64);
    while scored < samples {
        let arch = random_architecture(seed::derive(root, "baseline", &[draws]), mode, limits);
        draws += 1;
        let lowered = match &arch {
            Architecture::Layers(_) => arch.clone(),
            Architecture::Cell { .. } => match expand_stack(&arch, input) {
                Ok(l) => l,
                Err(_) => continue,
            },
        };
        let Ok(usage) = estimate(&lowered, input) else { continue };
        let Ok(perf) = surrogate_performance(&arch, input) else { continue };
        scored += 1;
        let r = reward(perf, &usage, constraints)?;
        let satisfied = violations(&usage, constraints)?.iter().all(|&v| v == 1.0);
        if satisfied && best_feasible.is_none_or(|b| r > b) {
            best_feasible = Some(r);
        }
        if best.as_ref().is_none_or(|b| r > b.0) {
            best = Some((r, usage.params, satisfied, arch));
        }
    }
    let (best_reward, best_params, best_satisfied, best_architecture) = best.expect("at least one sample");
    Ok(RandomBaseline {
        seed: root,
        mode,
        input,
        constraints: constraints.clone(),
        samples,
        draws,
        best_reward,
        best_params,
        best_satisfied,
        best_feasible_reward: best_feasible,
        best_architecture,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::{ConstraintSpec, Metric};

    #[test]
    fn counts_only_scored_samples() {
        let cs = ConstraintSet(vec![ConstraintSpec::upper(Metric::ModelSize, 1e5)]);
        let b = random_baseline(3, Mode::CellNet, &RandomLimits::default(), Shape::new(8, 8, 1), &cs, 50).unwrap();
        assert_eq!(b.samples, 50);
        assert!(b.draws >= 50);
        assert!(b.best_feasible_reward.is_none_or(|f| f <= b.best_reward));
        let again = random_baseline(3, Mode::CellNet, &RandomLimits::default(), Shape::new(8, 8, 1), &cs, 50).unwrap();
        assert_eq!(b, again);
    }
}
