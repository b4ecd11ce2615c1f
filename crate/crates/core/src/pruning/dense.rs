use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Values round-trip through the f32 parameter file, so keep them representable.
pub(crate) fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub(crate) fn glorot(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = gain * (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| f32_exact(rng.random_range(-bound..bound)))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]
            })
            .collect()
    }

    pub(crate) fn push_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    pub(crate) fn from_params(inputs: usize, outputs: usize, data: &[f64]) -> Self {
        let (w, b) = data.split_at(inputs * outputs);
        Self {
            inputs,
            outputs,
            weights: w.to_vec(),
            bias: b[..outputs].to_vec(),
        }
    }
}
