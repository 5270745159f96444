use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamRole, ParamStore};

/// Xavier-uniform for every matrix, ones for normalization weights.
/// Parameters are visited in store order from one seeded stream.
pub fn init_weights(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.iter_mut() {
        if p.role == ParamRole::Norm || !p.value.is_matrix() {
            p.value.data_mut().fill(1.0);
            continue;
        }
        let (fan_in, fan_out) = (p.value.rows(), p.value.cols());
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in p.value.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
}
