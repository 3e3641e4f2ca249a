use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{crop_patch, BoundingBox, GrayImage};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Embeddings with pre-normalization norm below this fall back to the first
/// basis vector.
pub const EMBEDDING_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Side of the downsampled square input patch.
    pub input_size: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            hidden: vec![256, 128],
            embedding_dim: 64,
        }
    }
}

/// Fully connected layer, weights row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Weights of the patch encoder: ReLU hidden layers, linear output, then L2
/// normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub input_size: usize,
    pub layers: Vec<DenseLayer>,
}

impl EncoderParams {
    /// He-initialized weights, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0xe4c0de]);
        let mut params = Self::zeros(config);
        for layer in &mut params.layers {
            let std = (2.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                let z: f64 = rng.sample(StandardNormal);
                *w = std * z;
            }
        }
        params
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut dims = vec![config.input_size * config.input_size];
        dims.extend(&config.hidden);
        dims.push(config.embedding_dim);
        EncoderParams {
            input_size: config.input_size,
            layers: dims
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn input_dim(&self) -> usize {
        self.input_size * self.input_size
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = self.input_dim();
        for layer in &self.layers {
            if layer.inputs != expected
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.biases.len() != layer.outputs
            {
                return Err(Error::Validation("inconsistent encoder layer shapes".into()));
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite encoder parameter".into()));
            }
            expected = layer.outputs;
        }
        if self.layers.is_empty() {
            return Err(Error::Validation("encoder has no layers".into()));
        }
        Ok(())
    }

    /// Forward pass returning every layer's output (post-activation for
    /// hidden layers, linear for the last).
    pub(crate) fn forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(x, &mut out);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulate parameter gradients given `d loss / d raw output`.
    pub(crate) fn backward(
        &self,
        input: &[f64],
        acts: &[Vec<f64>],
        grad_out: &[f64],
        grads: &mut EncoderParams,
    ) {
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = if i == 0 { input } else { &acts[i - 1] };
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, xv) in row.iter_mut().zip(x) {
                    *gw += d * xv;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU mask of the previous hidden layer
            for (p, a) in prev.iter_mut().zip(&acts[i - 1]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    pub(crate) fn zeros_like(&self) -> EncoderParams {
        EncoderParams {
            input_size: self.input_size,
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }
}

/// L2 normalization with the first-basis-vector fallback. Returns the
/// normalized vector and the pre-normalization norm.
pub(crate) fn normalize(raw: &[f64]) -> (Vec<f64>, f64) {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < EMBEDDING_NORM_EPS {
        let mut e = vec![0.0; raw.len()];
        e[0] = 1.0;
        (e, norm)
    } else {
        (raw.iter().map(|v| v / norm).collect(), norm)
    }
}

/// Backpropagate through `z = u / |u|`.
pub(crate) fn normalize_backward(z: &[f64], norm: f64, grad_z: &[f64]) -> Vec<f64> {
    if norm < EMBEDDING_NORM_EPS {
        return vec![0.0; z.len()];
    }
    let dot: f64 = z.iter().zip(grad_z).map(|(a, b)| a * b).sum();
    z.iter()
        .zip(grad_z)
        .map(|(zi, gi)| (gi - zi * dot) / norm)
        .collect()
}

/// Image-to-input conversion: crop the box to `crop_size`, resize to the
/// encoder input and scale intensities to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPipeline {
    pub crop_size: usize,
    pub input_size: usize,
}

impl PatchPipeline {
    pub fn crop(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<GrayImage> {
        crop_patch(image, bbox, self.crop_size, self.crop_size)
    }

    pub fn input(&self, image: &GrayImage, bbox: &BoundingBox) -> Result<Vec<f64>> {
        Ok(patch_to_input(&self.crop(image, bbox)?, self.input_size))
    }
}

pub(crate) fn patch_to_input(patch: &GrayImage, input_size: usize) -> Vec<f64> {
    let resized;
    let p = if patch.width() == input_size && patch.height() == input_size {
        patch
    } else {
        resized = patch.resize(input_size, input_size);
        &resized
    };
    p.pixels().iter().map(|v| v / 255.0).collect()
}

pub(crate) fn encode_input(params: &EncoderParams, input: &[f64]) -> Result<Vec<f64>> {
    let acts = params.forward(input);
    let raw = acts.last().unwrap();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("non-finite encoder activation".into()));
    }
    Ok(normalize(raw).0)
}

/// Unit-norm embedding of a patch (any size; resized to the encoder input).
pub fn encode(params: &EncoderParams, patch: &GrayImage) -> Result<Vec<f64>> {
    encode_input(params, &patch_to_input(patch, params.input_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_size: 8,
            hidden: vec![16, 12],
            embedding_dim: 6,
        }
    }

    fn random_patch(seed: u64) -> GrayImage {
        let mut rng = rng_from(seed, &[]);
        let px = (0..24 * 24).map(|_| rng.random_range(0.0..255.0)).collect();
        GrayImage::new(24, 24, px).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let params = EncoderParams::init(&EncoderConfig::default(), 1);
        params.validate().unwrap();
        for s in 0..5 {
            let p = random_patch(s);
            let z = encode(&params, &p).unwrap();
            assert_eq!(z.len(), 64);
            let n: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(z, encode(&params, &p.clone()).unwrap());
        }
    }

    #[test]
    fn zero_weights_fall_back_to_first_basis_vector() {
        let params = EncoderParams::zeros(&small());
        let z = encode(&params, &random_patch(3)).unwrap();
        assert_eq!(z, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_weights_are_reported() {
        let mut params = EncoderParams::init(&small(), 2);
        params.layers[2].biases[0] = f64::INFINITY;
        assert!(matches!(
            encode(&params, &random_patch(1)),
            Err(Error::NumericOverflow(_))
        ));
        assert!(params.validate().is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let params = EncoderParams::init(&small(), 5);
        let input = patch_to_input(&random_patch(7), 8);
        // loss = c . normalize(f(x))
        let c: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.3).collect();
        let loss = |p: &EncoderParams| -> f64 {
            let z = encode_input(p, &input).unwrap();
            z.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let acts = params.forward(&input);
        let (z, norm) = normalize(acts.last().unwrap());
        let g_raw = normalize_backward(&z, norm, &c);
        let mut grads = params.zeros_like();
        params.backward(&input, &acts, &g_raw, &mut grads);

        let analytic: Vec<f64> = grads.values().copied().collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in (0..analytic.len()).step_by(7) {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            *minus.values_mut().nth(idx).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / analytic[idx].abs().max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
