//! Fixtures shared by the benchmarks.

use hpo_core::tpe::ObservationSet;
use hpo_core::{Builtin, Direction, SearchSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` uniform draws from `objective`'s space, scored by the objective.
pub fn observations(objective: Builtin, n: usize, seed: u64) -> (SearchSpace, ObservationSet) {
    let space = objective.space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = ObservationSet::new(Direction::Minimize);
    for it in 0..n {
        let a = space.sample_uniform(&mut rng);
        let score = objective.evaluate(&a).expect("builtin accepts its own space");
        obs.push(a, score, it as u32).expect("finite score");
    }
    (space, obs)
}
