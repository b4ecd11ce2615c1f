use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{f32_exact, Dense};
use super::PruneError;
use crate::vector::sigmoid;

pub const INPUT_WIDTH: usize = 2;
pub const DEFAULT_HIDDEN: usize = 8;

/// Two-input relevance MLP: `[normalized distance, ln(1 + weight)] -> tanh -> sigmoid`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub seed: u64,
    pub hidden: Dense,
    pub output: Dense,
}

impl MlpParams {
    /// Deterministic initialization. Every hidden unit gets a negative weight on
    /// the distance input and a positive output weight, so the score can only
    /// fall as the distance grows. The structural-weight input is positive.
    pub fn seeded(seed: u64, hidden_width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Dense::zeros(INPUT_WIDTH, hidden_width);
        let mut output = Dense::zeros(hidden_width, 1);
        let out_scale = 2.0 / (hidden_width as f64).sqrt();
        for j in 0..hidden_width {
            hidden.weights[j * INPUT_WIDTH] = f32_exact(-rng.random_range(1.0..3.0));
            hidden.weights[j * INPUT_WIDTH + 1] = f32_exact(rng.random_range(0.2..1.0));
            hidden.bias[j] = f32_exact(rng.random_range(-0.5..0.5));
            output.weights[j] = f32_exact(rng.random_range(0.5..1.5) * out_scale);
        }
        output.bias[0] = f32_exact(rng.random_range(-0.25..0.25));
        Self {
            seed,
            hidden,
            output,
        }
    }

    pub fn zeros(hidden_width: usize) -> Self {
        Self {
            seed: 0,
            hidden: Dense::zeros(INPUT_WIDTH, hidden_width),
            output: Dense::zeros(hidden_width, 1),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.outputs
    }

    pub fn forward(&self, input: [f64; INPUT_WIDTH]) -> f64 {
        let h: Vec<f64> = self
            .hidden
            .apply(&input)
            .into_iter()
            .map(f64::tanh)
            .collect();
        sigmoid(self.output.apply(&h)[0])
    }
}

/// Scores one element. `distance` is expected to be already normalized by the
/// subgraph's largest query distance.
pub fn relevance_mlp(
    params: &MlpParams,
    distance: f64,
    structural_weight: f64,
) -> Result<f64, PruneError> {
    if !distance.is_finite() || !structural_weight.is_finite() {
        return Err(PruneError::Input("non-finite MLP input".into()));
    }
    if structural_weight <= 0.0 {
        return Err(PruneError::Input(
            "structural weight must be positive".into(),
        ));
    }
    Ok(super::open_unit(
        params.forward([distance, structural_weight.ln_1p()]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_params_give_half() {
        let p = MlpParams::zeros(8);
        for (d, w) in [(0.0, 1.0), (0.7, 100.0), (5.0, 0.01)] {
            assert_eq!(relevance_mlp(&p, d, w).unwrap(), 0.5);
        }
    }

    #[test]
    fn golden_seed_42() {
        let p = MlpParams::seeded(42, DEFAULT_HIDDEN);
        // structural weight 1 gives the second input ln 2
        let v = relevance_mlp(&p, 0.0, 1.0).unwrap();
        assert!((v - GOLDEN_SEED_42).abs() < 1e-12, "got {v:.17}");
    }

    const GOLDEN_SEED_42: f64 = 0.866_852_139_656_750_2;

    #[test]
    fn rejects_bad_input() {
        let p = MlpParams::seeded(1, 8);
        assert!(relevance_mlp(&p, f64::NAN, 1.0).is_err());
        assert!(relevance_mlp(&p, 0.1, 0.0).is_err());
        assert!(relevance_mlp(&p, 0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn seeded_is_deterministic() {
        assert_eq!(MlpParams::seeded(9, 8), MlpParams::seeded(9, 8));
        assert_ne!(MlpParams::seeded(9, 8), MlpParams::seeded(10, 8));
    }

    proptest! {
        #[test]
        fn output_in_open_unit_interval(d in 0.0f64..50.0, w in 0.001f64..1e6, seed in 0u64..1000) {
            let s = relevance_mlp(&MlpParams::seeded(seed, 8), d, w).unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }

        #[test]
        fn farther_never_scores_higher(d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, w in 0.5f64..50.0, seed in 0u64..1000) {
            let p = MlpParams::seeded(seed, 8);
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(relevance_mlp(&p, far, w).unwrap() <= relevance_mlp(&p, near, w).unwrap());
        }
    }
}
