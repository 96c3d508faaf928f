//! Feed-forward network with sigmoid hidden layers and an affine output.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Affine map `(v − offset) / scale` and its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation of each column; deviations below
    /// `1e-12` are replaced by 1.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let n = rows.first().map_or(0, |r| r.len());
        let count = rows.len().max(1) as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { offset: mean, scale }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| v * s + o)
            .collect()
    }
}

/// Weights (row-major, `out × in`) and biases of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Network parameters: `layer_sizes = [n_in, H_1, …, H_L, n_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpParams {
    /// All-zero weights and identity normalization.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Surrogate(format!("bad layer sizes {layer_sizes:?}")));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            input_norm: Normalization::identity(layer_sizes[0]),
            output_norm: Normalization::identity(*layer_sizes.last().unwrap()),
        })
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn random(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let bound = 1.0 / (layer_sizes[l] as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn n_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layer sizes")
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks the dimension chain, normalization scales and finiteness.
    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Surrogate(format!("bad layer sizes {sizes:?}")));
        }
        if self.layers.len() != sizes.len() - 1 {
            return Err(Error::Surrogate("layer count disagrees with layer_sizes".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != sizes[l] * sizes[l + 1] || layer.bias.len() != sizes[l + 1] {
                return Err(Error::Surrogate(format!("layer {l} has wrong shape")));
            }
        }
        for (norm, n) in [(&self.input_norm, sizes[0]), (&self.output_norm, self.n_out())] {
            if norm.offset.len() != n || norm.scale.len() != n {
                return Err(Error::Surrogate("normalization has wrong length".into()));
            }
            if norm.scale.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Surrogate("normalization scales must be positive".into()));
            }
        }
        let finite = self
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .chain(self.input_norm.offset.iter().chain(&self.input_norm.scale))
            .chain(self.output_norm.offset.iter().chain(&self.output_norm.scale))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Surrogate("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Flat parameter vector θ: per layer, weights row-major then biases.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            t.extend_from_slice(&l.weights);
            t.extend_from_slice(&l.bias);
        }
        t
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        check_len("parameter vector", self.n_params(), theta.len())?;
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&theta[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&theta[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Network output in normalized units for a normalized input.
    fn forward_normalized(&self, zn: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut a = zn.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let n_in = self.layer_sizes[l];
            let mut next = layer.bias.clone();
            for (o, row) in next.iter_mut().zip(layer.weights.chunks_exact(n_in)) {
                *o += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            a = next;
        }
        a
    }
}

/// `K(z; θ)`: normalize, sigmoid hidden layers, affine output, denormalize.
pub fn mlp_forward(params: &MlpParams, z: &[f64]) -> Result<Vec<f64>> {
    check_len("network input", params.n_in(), z.len())?;
    let zn = params.input_norm.apply(z);
    Ok(params.output_norm.invert(&params.forward_normalized(&zn)))
}

fn weight_view(params: &MlpParams, l: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape(
        (params.layer_sizes[l + 1], params.layer_sizes[l]),
        &params.layers[l].weights,
    )
    .expect("validated layer shape")
}

/// `½ Σ_b Σ_j c_j (o_bj − t_bj)²` and its gradient over θ, where `o` is
/// the normalized-space output for normalized inputs `zn` (rows are
/// samples).
pub(crate) fn weighted_loss_and_gradient(
    params: &MlpParams,
    zn: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    col_weights: &[f64],
) -> (f64, Vec<f64>) {
    let n_layers = params.layers.len();
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(zn.to_owned());
    for l in 0..n_layers {
        let w = weight_view(params, l);
        let b = Array1::from(params.layers[l].bias.clone());
        let mut a = acts[l].dot(&w.t()) + &b;
        if l + 1 < n_layers {
            a.mapv_inplace(sigmoid);
        }
        acts.push(a);
    }
    let cw = Array1::from(col_weights.to_vec());
    let diff = &acts[n_layers] - &targets;
    let mut delta = &diff * &cw;
    let loss = 0.5 * (&diff * &delta).sum();
    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let gw = delta.t().dot(&acts[l]);
        let gb = delta.sum_axis(Axis(0));
        if l > 0 {
            let back = delta.dot(&weight_view(params, l));
            let a = &acts[l];
            delta = back * &a.mapv(|v| v * (1.0 - v));
        }
        grads.push((gw, gb));
    }
    grads.reverse();
    let mut g = Vec::with_capacity(params.n_params());
    for (gw, gb) in grads {
        g.extend(gw.iter());
        g.extend(gb.iter());
    }
    (loss, g)
}

/// Gradient of `J_NN(θ) = ½ Σ_j ‖K(z_j; θ) − u_j‖²` over θ, with the
/// normalization constants held fixed. Returns `(J_NN, ∇J_NN)`.
pub fn mlp_gradient(params: &MlpParams, inputs: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    check_len("label count", inputs.len(), labels.len())?;
    if inputs.is_empty() {
        return Err(Error::Surrogate("gradient of an empty batch".into()));
    }
    params.validate()?;
    let (zn, tn) = normalized_batch(params, inputs, labels)?;
    let weights: Vec<f64> = params.output_norm.scale.iter().map(|s| s * s).collect();
    Ok(weighted_loss_and_gradient(params, zn.view(), tn.view(), &weights))
}

/// Normalized input and target matrices, one row per sample.
pub(crate) fn normalized_batch(
    params: &MlpParams,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n_in, n_out) = (params.n_in(), params.n_out());
    let mut zn = Array2::zeros((inputs.len(), n_in));
    let mut tn = Array2::zeros((inputs.len(), n_out));
    for (b, (z, u)) in inputs.iter().zip(labels).enumerate() {
        check_len("network input", n_in, z.len())?;
        check_len("network label", n_out, u.len())?;
        for (j, v) in params.input_norm.apply(z).into_iter().enumerate() {
            zn[(b, j)] = v;
        }
        for (j, v) in params.output_norm.apply(u).into_iter().enumerate() {
            tn[(b, j)] = v;
        }
    }
    Ok((zn, tn))
}
