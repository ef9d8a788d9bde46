//! Fixtures shared by the benchmarks.

use panoseg::{ModelConfig, ModelState, Network, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default architecture at `height × 2·height` with seeded weights and a
/// random input in [0, 1].
pub fn forward_fixture(height: usize) -> (Network, ModelState, Tensor) {
    let config = ModelConfig::default().with_extent(height, 2 * height);
    let net = Network::new(config).expect("default config is valid");
    let state = net.init(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::uniform(&[1, 3, height, 2 * height], 0.0, 1.0, &mut rng);
    (net, state, input)
}
