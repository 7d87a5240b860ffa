use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Tensor};

/// Seeded generator used for parameter initialization.
///
/// Each model component draws from its own stream (`seed`, `stream`), so the
/// initial values of one component do not depend on which other components
/// exist. Two models with different gate layouts therefore share identical
/// expert and tower weights for the same seed.
pub struct ParamRng {
    rng: ChaCha8Rng,
}

impl ParamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        ParamRng { rng }
    }

    /// Stream id derived from a component name (FNV-1a).
    pub fn for_component(seed: u64, name: &str) -> Self {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Self::new(seed, h)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// He-style normal init: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ParamRng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::cast(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
