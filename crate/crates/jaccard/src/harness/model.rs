//! Per-pixel MLP over local patch features.
//!
//! Every pixel is classified from the `patch x patch` window of all feature
//! channels around it (replicate padding at the borders). The forward pass
//! is expressed on an [`ExprGraph`], so one backward pass yields gradients
//! for all parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::autodiff::{Bindings, ExprGraph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct PatchModel {
    pub patch: usize,
    pub channels: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    /// Interleaved `[w0, b0, w1, b1, ...]`; weights are `(out, in)`, biases
    /// `(out, 1)`.
    pub params: Vec<Tensor>,
}

impl PatchModel {
    pub fn init(
        patch: usize,
        channels: usize,
        classes: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let feature_dim = channels * patch * patch;
        let mut sizes = vec![feature_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let mut params = Vec::new();
        for layer in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[layer], sizes[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> =
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(vec![fan_out, fan_in], w).expect("finite init"));
            params.push(Tensor::zeros(&[fan_out, 1]));
        }
        PatchModel { patch, channels, classes, hidden: hidden.to_vec(), params }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn layer_count(&self) -> usize {
        self.params.len() / 2
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layer_count()).flat_map(|l| [format!("w{l}"), format!("b{l}")]).collect()
    }

    /// Patch features of one image: `(channels * patch^2, H*W)` with
    /// replicate padding.
    pub fn features(channels: &Tensor, patch: usize) -> Tensor {
        let shape = channels.shape();
        let (c0, h, w) = (shape[0], shape[1], shape[2]);
        let pixels = h * w;
        let r = (patch / 2) as isize;
        let feature_dim = c0 * patch * patch;
        let mut data = vec![0.0f64; feature_dim * pixels];
        let src = channels.data();
        for c in 0..c0 {
            for dy in 0..patch {
                for dx in 0..patch {
                    let row = (c * patch + dy) * patch + dx;
                    for i in 0..h {
                        let si = (i as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                        for j in 0..w {
                            let sj =
                                (j as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                            data[row * pixels + i * w + j] = src[c * pixels + si * w + sj];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![feature_dim, pixels], data).expect("finite features")
    }

    /// Declares one graph input per parameter and returns their nodes.
    pub fn param_inputs(&self, g: &mut ExprGraph) -> Vec<NodeId> {
        self.param_names().iter().map(|name| g.input(name)).collect()
    }

    /// Binds the current parameter values.
    pub fn bind_params(&self, bindings: &mut Bindings) {
        for (name, value) in self.param_names().iter().zip(&self.params) {
            bindings.set(name, value.clone());
        }
    }

    /// Builds the forward pass from `(F, pixels)` features to `(C, pixels)`
    /// softmax probabilities.
    pub fn forward(
        &self,
        g: &mut ExprGraph,
        features: NodeId,
        params: &[NodeId],
        _pixels: usize,
    ) -> NodeId {
        let layers = self.layer_count();
        let mut x = features;
        for layer in 0..layers {
            let wx = g.matmul(params[2 * layer], x);
            let z = g.add(wx, params[2 * layer + 1]);
            x = if layer + 1 == layers { g.softmax(z, 0) } else { g.relu(z) };
        }
        x
    }

    /// Evaluates the model on concrete features.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor, HarnessError> {
        let pixels = features.shape()[1];
        let mut g = ExprGraph::new();
        let feats = g.constant(features.clone());
        let params: Vec<NodeId> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let root = self.forward(&mut g, feats, &params, pixels);
        Ok(g.evaluate(root, &Bindings::new())?)
    }
}
