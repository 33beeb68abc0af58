//! Minimal dense-network substrate: exact backpropagation, adaptive-moment
//! updates, and the variational autoencoder used for latent feature
//! extraction. Everything is f64 and deterministic given caller-supplied
//! seeds and noise.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input has dimension {got}, network expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("tape was recorded by a network with a different architecture")]
    StaleTape,
    #[error("gradient shapes do not match the network")]
    ShapeMismatch,
    #[error("model file is malformed: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fully-connected network: affine + leaky-rectifier hidden layers and a
/// linear output layer.
#[derive(Debug, Clone)]
pub struct DenseNet {
    dims: Vec<usize>,
    /// Row-major (out x in) per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    leaky_slope: f64,
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Tape {
    dims: Vec<usize>,
    /// Input to each layer (length = number of layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    preacts: Vec<Vec<f64>>,
}

/// Parameter gradients in the same shapes as the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
    /// Gradient with respect to the network input.
    pub d_input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            d_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            d_input: vec![0.0; net.dims[0]],
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.d_input.iter_mut().zip(&other.d_input) {
            *x += y;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.d_weights {
            for x in w.iter_mut() {
                *x *= k;
            }
        }
        for b in &mut self.d_biases {
            for x in b.iter_mut() {
                *x *= k;
            }
        }
        for x in &mut self.d_input {
            *x *= k;
        }
    }
}

impl DenseNet {
    /// He-style initialization scaled for the leaky rectifier.
    pub fn init(dims: &[usize], leaky_slope: f64, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let scale = (2.0 / (1.0 + leaky_slope * leaky_slope) / n_in as f64).sqrt();
            let w: Vec<f64> = (0..n_in * n_out).map(|_| gauss(rng) * scale).collect();
            weights.push(w);
            biases.push(vec![0.0; n_out]);
        }
        Self { dims: dims.to_vec(), weights, biases, leaky_slope }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn act(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.leaky_slope * z
        }
    }

    fn act_grad(&self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }

    /// Forward pass recording the tape needed for `backward`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NeuralError> {
        if x.len() != self.dims[0] {
            return Err(NeuralError::DimensionMismatch { got: x.len(), want: self.dims[0] });
        }
        let n_layers = self.dims.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut a = x.to_vec();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let mut z = self.biases[l].clone();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                let mut acc = 0.0;
                for (wi, ai) in row.iter().zip(&a) {
                    acc += wi * ai;
                }
                *zr += acc;
            }
            inputs.push(a);
            let next = if l + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.act(v)).collect()
            };
            preacts.push(z);
            a = next;
            debug_assert_eq!(a.len(), n_out);
        }
        Ok((a, Tape { dims: self.dims.clone(), inputs, preacts }))
    }

    /// Forward pass without a tape.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Exact gradients of the recorded computation for upstream `d_output`.
    pub fn backward(&self, tape: &Tape, d_output: &[f64]) -> Result<Gradients, NeuralError> {
        if tape.dims != self.dims {
            return Err(NeuralError::StaleTape);
        }
        if d_output.len() != self.output_dim() {
            return Err(NeuralError::DimensionMismatch {
                got: d_output.len(),
                want: self.output_dim(),
            });
        }
        let n_layers = self.dims.len() - 1;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_output.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, _n_out) = (self.dims[l], self.dims[l + 1]);
            let a = &tape.inputs[l];
            let w = &self.weights[l];
            let dw = &mut grads.d_weights[l];
            for (r, dr) in delta.iter().enumerate() {
                let row = &mut dw[r * n_in..(r + 1) * n_in];
                for (c, ac) in a.iter().enumerate() {
                    row[c] += dr * ac;
                }
            }
            grads.d_biases[l].copy_from_slice(&delta);
            // dL/d(input of layer l)
            let mut dx = vec![0.0; n_in];
            for (r, dr) in delta.iter().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                for (c, dxc) in dx.iter_mut().enumerate() {
                    *dxc += row[c] * dr;
                }
            }
            if l > 0 {
                for (d, z) in dx.iter_mut().zip(&tape.preacts[l - 1]) {
                    *d *= self.act_grad(*z);
                }
            }
            if l == 0 {
                grads.d_input = dx;
            } else {
                delta = dx;
            }
        }
        Ok(grads)
    }

    /// Flat view of all parameters for the optimizer (weights then bias per
    /// layer, in layer order).
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.extend(w.iter_mut());
            out.extend(b.iter_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::ShapeMismatch);
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = *it.next().unwrap();
            }
            for x in b.iter_mut() {
                *x = *it.next().unwrap();
            }
        }
        Ok(())
    }

    fn grads_flat(grads: &Gradients) -> impl Iterator<Item = &f64> {
        grads
            .d_weights
            .iter()
            .zip(grads.d_biases.iter())
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    /// Polyak blend: self <- tau * source + (1 - tau) * self.
    pub fn blend_from(&mut self, source: &DenseNet, tau: f64) -> Result<(), NeuralError> {
        if self.dims != source.dims {
            return Err(NeuralError::ShapeMismatch);
        }
        for (dst, src) in self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .zip(source.weights.iter().chain(source.biases.iter()))
        {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
        Ok(())
    }

    /// Binary model format: u64 dim count, u64 dims, then f64 parameters in
    /// layer order (weights row-major, then bias). All little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NeuralError> {
        w.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for p in self.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, leaky_slope: f64) -> Result<Self, NeuralError> {
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let n_dims = u64::from_le_bytes(buf8) as usize;
        if n_dims < 2 || n_dims > 64 {
            return Err(NeuralError::BadModelFile(format!("implausible dim count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            r.read_exact(&mut buf8)?;
            dims.push(u64::from_le_bytes(buf8) as usize);
        }
        let mut net = DenseNet {
            weights: dims.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            dims,
            leaky_slope,
        };
        let mut flat = vec![0.0; net.param_count()];
        for x in flat.iter_mut() {
            r.read_exact(&mut buf8)?;
            *x = f64::from_le_bytes(buf8);
        }
        net.set_params(&flat)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path, leaky_slope: f64) -> Result<Self, NeuralError> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f, leaky_slope)
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; net.param_count()],
            second_moment: vec![0.0; net.param_count()],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One adaptive-moment update. Deterministic given state.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NeuralError> {
        if self.first_moment.len() != net.param_count() {
            return Err(NeuralError::ShapeMismatch);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut params = net.params_mut();
        let mut i = 0;
        for g in DenseNet::grads_flat(grads) {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            i += 1;
        }
        debug_assert_eq!(i, self.first_moment.len());
        Ok(())
    }
}

/// Standard-normal draw via Box-Muller.
pub fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Encoder/decoder pair with a diagonal-Gaussian latent. The encoder emits
/// mean and log-variance concatenated; the decoder reconstructs the input.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub encoder_grads: Gradients,
    pub decoder_grads: Gradients,
}

impl VaeModel {
    pub fn init(
        signature_dim: usize,
        hidden: usize,
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder =
            DenseNet::init(&[signature_dim, hidden, 2 * latent_dim], DEFAULT_LEAKY_SLOPE, rng);
        let decoder = DenseNet::init(&[latent_dim, hidden, signature_dim], DEFAULT_LEAKY_SLOPE, rng);
        Self { encoder, decoder, latent_dim }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn signature_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Loss and exact gradients for one sample. `noise` is the caller-supplied
    /// reparameterization draw (z = mu + sigma * noise).
    ///
    /// total = |x_hat - x|^2 + 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)
    pub fn loss(&self, x: &[f64], noise: &[f64]) -> Result<VaeLoss, NeuralError> {
        if noise.len() != self.latent_dim {
            return Err(NeuralError::DimensionMismatch {
                got: noise.len(),
                want: self.latent_dim,
            });
        }
        let (enc_out, enc_tape) = self.encoder.forward(x)?;
        let (mu, logvar) = enc_out.split_at(self.latent_dim);
        let sigma: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> =
            mu.iter().zip(&sigma).zip(noise).map(|((m, s), e)| m + s * e).collect();
        let (x_hat, dec_tape) = self.decoder.forward(&z)?;

        let reconstruction: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let kl: f64 = mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();

        let d_xhat: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
        let decoder_grads = self.decoder.backward(&dec_tape, &d_xhat)?;
        let dz = &decoder_grads.d_input;

        // Chain rule through z = mu + sigma * eps plus the closed-form KL.
        let mut d_enc_out = vec![0.0; 2 * self.latent_dim];
        for i in 0..self.latent_dim {
            d_enc_out[i] = dz[i] + mu[i];
            d_enc_out[self.latent_dim + i] =
                dz[i] * 0.5 * sigma[i] * noise[i] + 0.5 * (logvar[i].exp() - 1.0);
        }
        let encoder_grads = self.encoder.backward(&enc_tape, &d_enc_out)?;

        Ok(VaeLoss { total: reconstruction + kl, reconstruction, kl, encoder_grads, decoder_grads })
    }

    /// Deterministic latent feature: the encoder mean.
    pub fn extract_feature(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let out = self.encoder.infer(x)?;
        Ok(out[..self.latent_dim].to_vec())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NeuralError> {
        self.encoder.write_to(w)?;
        self.decoder.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NeuralError> {
        let encoder = DenseNet::read_from(r, DEFAULT_LEAKY_SLOPE)?;
        let decoder = DenseNet::read_from(r, DEFAULT_LEAKY_SLOPE)?;
        let latent_dim = decoder.input_dim();
        if encoder.output_dim() != 2 * latent_dim {
            return Err(NeuralError::BadModelFile("encoder/decoder latent dims disagree".into()));
        }
        Ok(Self { encoder, decoder, latent_dim })
    }
}

/// One epoch of VAE training over `samples` in a seeded shuffled order.
/// Returns the epoch-mean loss.
pub fn vae_train_epoch(
    model: &mut VaeModel,
    samples: &[Vec<f64>],
    enc_opt: &mut OptimizerState,
    dec_opt: &mut OptimizerState,
    rng: &mut impl Rng,
) -> Result<f64, NeuralError> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut total = 0.0;
    for idx in order {
        let noise: Vec<f64> = (0..model.latent_dim()).map(|_| gauss(rng)).collect();
        let loss = model.loss(&samples[idx], &noise)?;
        enc_opt.step(&mut model.encoder, &loss.encoder_grads)?;
        dec_opt.step(&mut model.decoder, &loss.decoder_grads)?;
        total += loss.total;
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss over a sample set with caller-fixed noise vectors: a
/// deterministic evaluation of the objective, with no parameter updates.
pub fn vae_eval_loss(
    model: &VaeModel,
    samples: &[Vec<f64>],
    noises: &[Vec<f64>],
) -> Result<f64, NeuralError> {
    assert_eq!(samples.len(), noises.len());
    let mut total = 0.0;
    for (x, eps) in samples.iter().zip(noises) {
        total += model.loss(x, eps)?.total;
    }
    Ok(total / samples.len() as f64)
}

/// Central finite-difference check of `backward` against the loss
/// L = sum(y - target)^2. Returns the max relative error over every
/// parameter. Test-support code, but kept here so all architectures can be
/// swept by the acceptance suite.
pub fn finite_difference_max_rel_error(
    net: &mut DenseNet,
    x: &[f64],
    target: &[f64],
    h: f64,
) -> f64 {
    let loss_of = |net: &DenseNet, x: &[f64]| -> f64 {
        let y = net.infer(x).unwrap();
        y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let (y, tape) = net.forward(x).unwrap();
    let d_out: Vec<f64> = y.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
    let grads = net.backward(&tape, &d_out).unwrap();

    let mut analytic: Vec<f64> = Vec::with_capacity(net.param_count());
    for g in DenseNet::grads_flat(&grads) {
        analytic.push(*g);
    }

    let mut max_rel = 0.0_f64;
    let n = net.param_count();
    let mut flat = net.params();
    for i in 0..n {
        let orig = flat[i];
        flat[i] = orig + h;
        net.set_params(&flat).unwrap();
        let up = loss_of(net, x);
        flat[i] = orig - h;
        net.set_params(&flat).unwrap();
        let down = loss_of(net, x);
        flat[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    net.set_params(&flat).unwrap();
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_zero_weights_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenseNet::init(&[3, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let flat = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, -0.3];
        net.set_params(&flat).unwrap();
        let y = net.infer(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.7, -0.3]);
    }

    #[test]
    fn forward_identity_single_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenseNet::init(&[2, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        net.set_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let y = net.infer(&[-0.4, 2.5]).unwrap();
        assert_eq!(y, vec![-0.4, 2.5]);
    }

    #[test]
    fn forward_matches_hand_rolled_oracle() {
        // Straight-line reimplementation with explicit loops.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let net = DenseNet::init(&[4, 3, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let x = [0.3, -1.2, 0.5, 2.0];
        let flat = net.params();
        // Layer 0: 3x4 weights then 3 biases; layer 1: 2x3 then 2.
        let mut h = [0.0; 3];
        for r in 0..3 {
            let mut z = flat[12 + r];
            for c in 0..4 {
                z += flat[r * 4 + c] * x[c];
            }
            h[r] = if z > 0.0 { z } else { 0.01 * z };
        }
        let mut y = [0.0; 2];
        for r in 0..2 {
            let mut z = flat[15 + 6 + r];
            for c in 0..3 {
                z += flat[15 + r * 3 + c] * h[c];
            }
            y[r] = z;
        }
        let got = net.infer(&x).unwrap();
        assert_relative_eq!(got[0], y[0], max_relative = 1e-12);
        assert_relative_eq!(got[1], y[1], max_relative = 1e-12);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::init(&[3, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        assert!(matches!(
            net.infer(&[1.0, 2.0]),
            Err(NeuralError::DimensionMismatch { got: 2, want: 3 })
        ));
    }

    #[test]
    fn backward_linear_net_closed_form() {
        // Single linear layer, squared loss: dL/dW = 2 (y - t) x^T.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNet::init(&[2, 1], DEFAULT_LEAKY_SLOPE, &mut rng);
        net.set_params(&[1.5, -0.5, 0.25]).unwrap();
        let x = [2.0, 3.0];
        let (y, tape) = net.forward(&x).unwrap();
        let t = 1.0;
        let d = [2.0 * (y[0] - t)];
        let grads = net.backward(&tape, &d).unwrap();
        assert_relative_eq!(grads.d_weights[0][0], 2.0 * (y[0] - t) * x[0], max_relative = 1e-12);
        assert_relative_eq!(grads.d_weights[0][1], 2.0 * (y[0] - t) * x[1], max_relative = 1e-12);
        assert_relative_eq!(grads.d_biases[0][0], 2.0 * (y[0] - t), max_relative = 1e-12);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::init(&[3, 4, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let grads = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(DenseNet::grads_flat(&grads).all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_stale_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseNet::init(&[3, 4, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let b = DenseNet::init(&[3, 5, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let (_, tape) = a.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(b.backward(&tape, &[1.0, 0.0]), Err(NeuralError::StaleTape)));
    }

    #[test]
    fn finite_difference_small_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = DenseNet::init(&[4, 8, 3], DEFAULT_LEAKY_SLOPE, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| gauss(&mut rng)).collect();
        let t: Vec<f64> = (0..3).map(|_| gauss(&mut rng)).collect();
        let err = finite_difference_max_rel_error(&mut net, &x, &t, 1e-5);
        assert!(err < 1e-4, "finite-difference relative error {err}");
    }

    #[test]
    fn optimizer_zero_grads_leave_params_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNet::init(&[2, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let before = net.params();
        let mut opt = OptimizerState::new(&net, 1e-3);
        let grads = Gradients::zeros_like(&net);
        opt.step(&mut net, &grads).unwrap();
        assert_eq!(net.params(), before);
    }

    #[test]
    fn optimizer_reduces_scalar_quadratic() {
        // One 1x1 layer, loss (w*1 + b - 0)^2, minimized at w + b = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNet::init(&[1, 1], DEFAULT_LEAKY_SLOPE, &mut rng);
        net.set_params(&[2.0, 1.0]).unwrap();
        let mut opt = OptimizerState::new(&net, 0.05);
        let loss = |net: &DenseNet| {
            let y = net.infer(&[1.0]).unwrap()[0];
            y * y
        };
        let before = loss(&net);
        let (y, tape) = net.forward(&[1.0]).unwrap();
        let grads = net.backward(&tape, &[2.0 * y[0]]).unwrap();
        opt.step(&mut net, &grads).unwrap();
        assert!(loss(&net) < before);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net0 = DenseNet::init(&[3, 5, 2], DEFAULT_LEAKY_SLOPE, &mut rng);
        let run = || {
            let mut net = net0.clone();
            let mut opt = OptimizerState::new(&net, 1e-3);
            let (y, tape) = net.forward(&[0.5, -0.5, 1.0]).unwrap();
            let d: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let grads = net.backward(&tape, &d).unwrap();
            opt.step(&mut net, &grads).unwrap();
            net.params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kl_zero_when_posterior_equals_prior() {
        // mu = 0, logvar = 0 => KL = 0. Checked through the public loss by
        // forcing encoder outputs with zero weights and biases.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = VaeModel::init(4, 6, 2, &mut rng);
        let zeros = vec![0.0; model.encoder.param_count()];
        model.encoder.set_params(&zeros).unwrap();
        let loss = model.loss(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(loss.kl, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_closed_form_unit_case() {
        // One dimension with mu = 1, logvar = 0 gives exactly 0.5.
        let kl = 0.5 * (1.0_f64 * 1.0 + 0.0_f64.exp() - 1.0 - 0.0);
        assert_relative_eq!(kl, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = VaeModel::init(3, 4, 1, &mut rng);
        // Zero weights, bias mu=1, logvar=0.
        let mut flat = vec![0.0; model.encoder.param_count()];
        let n = flat.len();
        // Encoder dims [3,4,2]: last layer bias is the final 2 entries.
        flat[n - 2] = 1.0;
        model.encoder.set_params(&flat).unwrap();
        let loss = model.loss(&[0.0, 0.0, 0.0], &[0.0]).unwrap();
        assert_relative_eq!(loss.kl, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu: [f64; 2] = [0.7, -1.2];
        let logvar: [f64; 2] = [0.3, -0.5];
        let closed: f64 = mu
            .iter()
            .zip(&logvar)
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();
        // MC estimate of E_q[log q(z) - log p(z)] with z = mu + sigma * eps:
        // per draw, sum over dims of 0.5 * (z^2 - eps^2 - logvar).
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for d in 0..2 {
                let eps = gauss(&mut rng);
                let sigma = (0.5 * logvar[d]).exp();
                let z = mu[d] + sigma * eps;
                acc += 0.5 * (z * z - eps * eps - logvar[d]);
            }
        }
        let mc = acc / n as f64;
        assert!((closed - mc).abs() / closed.abs() < 0.01, "closed {closed} vs mc {mc}");
    }

    #[test]
    fn kl_is_nonnegative_under_random_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mu = gauss(&mut rng) * 2.0;
            let lv = gauss(&mut rng);
            let kl = 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
            assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn vae_gradients_pass_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = VaeModel::init(5, 6, 2, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| gauss(&mut rng)).collect();
        let noise: Vec<f64> = (0..2).map(|_| gauss(&mut rng)).collect();
        let base = model.loss(&x, &noise).unwrap();

        let h = 1e-6;
        // Encoder params.
        let mut flat = model.encoder.params();
        let mut analytic = Vec::new();
        for g in DenseNet::grads_flat(&base.encoder_grads) {
            analytic.push(*g);
        }
        for i in (0..flat.len()).step_by(7) {
            let mut m = model.clone();
            let orig = flat[i];
            flat[i] = orig + h;
            m.encoder.set_params(&flat).unwrap();
            let up = m.loss(&x, &noise).unwrap().total;
            flat[i] = orig - h;
            m.encoder.set_params(&flat).unwrap();
            let down = m.loss(&x, &noise).unwrap().total;
            flat[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "encoder param {i}: analytic {} numeric {}",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn extract_feature_is_deterministic_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = VaeModel::init(8, 10, 25, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| gauss(&mut rng)).collect();
        let a = model.extract_feature(&x).unwrap();
        let b = model.extract_feature(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = DenseNet::init(&[6, 9, 4], DEFAULT_LEAKY_SLOPE, &mut rng);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let loaded = DenseNet::read_from(&mut buf.as_slice(), DEFAULT_LEAKY_SLOPE).unwrap();
        assert_eq!(net.dims(), loaded.dims());
        assert_eq!(net.params(), loaded.params());
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut model = VaeModel::init(6, 8, 3, &mut rng);
            let samples: Vec<Vec<f64>> =
                (0..16).map(|_| (0..6).map(|_| gauss(&mut rng)).collect()).collect();
            let mut enc_opt = OptimizerState::new(&model.encoder, 1e-3);
            let mut dec_opt = OptimizerState::new(&model.decoder, 1e-3);
            for _ in 0..3 {
                vae_train_epoch(&mut model, &samples, &mut enc_opt, &mut dec_opt, &mut rng)
                    .unwrap();
            }
            (model.encoder.params(), model.decoder.params())
        };
        assert_eq!(run(), run());
    }
}
