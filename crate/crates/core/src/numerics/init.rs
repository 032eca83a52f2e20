use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STDDEV: f64 = 0.02;

/// Normal(0, stddev²) samples redrawn until they fall within ±2·stddev.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], stddev: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * stddev;
            }
        };
    }
    t
}
