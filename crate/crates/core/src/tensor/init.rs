//! Parameter initialisation.

use super::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How to fill a freshly created parameter tensor.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); matches standard linear/conv
    /// layer defaults.
    FanIn { fan_in: usize },
}

impl ParamInit {
    pub fn materialize(self, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Ones => vec![1.0; n],
            ParamInit::Constant(c) => vec![c; n],
            ParamInit::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            ParamInit::FanIn { fan_in } => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
        };
        Tensor { shape, data: std::sync::Arc::new(data) }
    }
}
