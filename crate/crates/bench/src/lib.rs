//! Fixtures shared by the criterion benchmarks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scoreloc::harness::{generate_synthetic_world, standard_predictor, Config, RelocaliserState, SyntheticWorld, WorldSpec};
use scoreloc::predictor::Predictor;
use scoreloc::reservoir::{Reservoir, ReservoirPoint};

pub fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect()
}

/// A full reservoir holding a few tight surface patches.
pub fn full_reservoir(seed: u64) -> Reservoir {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Reservoir::new(scoreloc::reservoir::DEFAULT_CAPACITY);
    let centres: Vec<Vector3<f64>> = (0..4).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..0.3))).collect();
    for i in 0..r.capacity() {
        let c = centres[i % centres.len()];
        let p = c + Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02));
        r.add_point(ReservoirPoint::new(p, [0.5; 3]), &mut rng);
    }
    r
}

/// Standard world with a trained relocaliser.
pub fn trained_world(test_frames: usize) -> (SyntheticWorld, RelocaliserState) {
    let world = generate_synthetic_world(&WorldSpec {
        test_frames,
        ..WorldSpec::default()
    });
    let mut state = RelocaliserState::new(Config::indoor(), Predictor::Synthetic(standard_predictor(&world, 1))).unwrap();
    state.train_online(&world.train).unwrap();
    (world, state)
}
