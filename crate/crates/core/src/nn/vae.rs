//! Convolutional variational autoencoder trained on the normal class only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_out_size, relu, relu_backward, sigmoid, sigmoid_backward, Conv2d, ConvTranspose2d, Linear};
use super::model::Model;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    /// Side length of the square single-channel input.
    pub input_size: usize,
    /// Encoder channel widths; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            input_size: 84,
            channels: vec![32, 64, 128, 256],
            kernel: 4,
            latent_dim: 128,
        }
    }
}

const STRIDE: usize = 2;
const PADDING: usize = 1;

impl VaeArch {
    /// Spatial side length entering each encoder layer, followed by the
    /// bottleneck side length.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size];
        for _ in &self.channels {
            let last = *sizes.last().unwrap();
            sizes.push(conv_out_size(last, self.kernel, STRIDE, PADDING));
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.latent_dim == 0 || self.kernel < 2 {
            return Err(Error::InvalidConfig(format!("degenerate VAE architecture {self:?}")));
        }
        let mut size = self.input_size;
        for _ in &self.channels {
            if size + 2 * PADDING < self.kernel {
                return Err(Error::InvalidConfig(format!(
                    "input {} too small for {} stride-2 layers",
                    self.input_size,
                    self.channels.len()
                )));
            }
            size = conv_out_size(size, self.kernel, STRIDE, PADDING);
        }
        Ok(())
    }

    fn bottleneck_len(&self) -> usize {
        let side = *self.spatial_sizes().last().unwrap();
        self.channels.last().unwrap() * side * side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae<T> {
    arch: VaeArch,
    encoder: Vec<Conv2d<T>>,
    fc_mu: Linear<T>,
    fc_logvar: Linear<T>,
    fc_decode: Linear<T>,
    decoder: Vec<ConvTranspose2d<T>>,
}

/// Batch-mean terms of the negative evidence lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Activations retained from a forward pass for backpropagation.
struct VaeTrace<T> {
    /// Post-ReLU output of every encoder layer.
    encoder: Vec<Tensor<T>>,
    mu: Tensor<T>,
    logvar: Tensor<T>,
    z: Tensor<T>,
    /// Post-ReLU decoder seed reshaped to `[N, C, s, s]`.
    seed: Tensor<T>,
    /// Output of every decoder layer (post-ReLU, last one post-sigmoid).
    decoder: Vec<Tensor<T>>,
}

impl<T> VaeTrace<T> {
    fn reconstruction(&self) -> &Tensor<T> {
        self.decoder.last().expect("decoder has layers")
    }
}

/// Per-sample closed-form KL(N(μ, e^logvar) ‖ N(0, I)) and squared error,
/// averaged over the batch. All slices hold `batch` equally sized rows.
pub fn negative_elbo<T: Scalar>(x: &[T], recon: &[T], mu: &[T], logvar: &[T], batch: usize) -> VaeLoss {
    let sse: f64 = x
        .iter()
        .zip(recon)
        .map(|(&a, &b)| {
            let d = (a - b).to_f64_lossy();
            d * d
        })
        .sum();
    let kl: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.to_f64_lossy(), lv.to_f64_lossy());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    let n = batch as f64;
    VaeLoss {
        total: (sse + kl) / n,
        reconstruction: sse / n,
        kl: kl / n,
    }
}

impl<T: Scalar> Vae<T> {
    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.arch.input_size;
        match x.shape() {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::Shape(format!("VAE expects [N, 1, {s}, {s}], got {other:?}"))),
        }
    }

    fn encode_trace(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let mut acts = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let input = acts.last().unwrap_or(x);
            acts.push(relu(&layer.forward(input)));
        }
        let last = acts.last().unwrap();
        let flat = last.clone().reshaped(&[x.batch(), last.item_len()]).expect("flatten");
        let mu = self.fc_mu.forward(&flat);
        let logvar = self.fc_logvar.forward(&flat);
        (acts, mu, logvar)
    }

    fn decode_trace(&self, z: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        let side = *self.arch.spatial_sizes().last().unwrap();
        let channels = *self.arch.channels.last().unwrap();
        let seed = relu(&self.fc_decode.forward(z))
            .reshaped(&[z.batch(), channels, side, side])
            .expect("decoder seed shape");
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.decoder.len());
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            let input = acts.last().unwrap_or(&seed);
            let pre = layer.forward(input);
            acts.push(if i == last { sigmoid(&pre) } else { relu(&pre) });
        }
        (seed, acts)
    }

    fn trace(&self, x: &Tensor<T>, eps: &Tensor<T>) -> VaeTrace<T> {
        let (encoder, mu, logvar) = self.encode_trace(x);
        let half = T::from_f64_lossy(0.5);
        let mut z = mu.clone();
        for ((zv, &lv), &e) in z.data_mut().iter_mut().zip(logvar.data()).zip(eps.data()) {
            *zv += e * (half * lv).exp();
        }
        let (seed, decoder) = self.decode_trace(&z);
        VaeTrace {
            encoder,
            mu,
            logvar,
            z,
            seed,
            decoder,
        }
    }

    /// Posterior mean and log-variance for a batch.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let (_, mu, logvar) = self.encode_trace(x);
        Ok((mu, logvar))
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.item_len() != self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "latent batch must be [N, {}], got {:?}",
                self.arch.latent_dim,
                z.shape()
            )));
        }
        let (_, mut acts) = self.decode_trace(z);
        Ok(acts.pop().unwrap())
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    /// Negative ELBO with the reparameterisation noise `eps` (`[N, latent]`)
    /// supplied by the caller.
    pub fn loss(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<VaeLoss> {
        self.check_input(x)?;
        self.check_eps(x, eps)?;
        let t = self.trace(x, eps);
        Ok(negative_elbo(
            x.data(),
            t.reconstruction().data(),
            t.mu.data(),
            t.logvar.data(),
            x.batch(),
        ))
    }

    pub fn loss_and_grad(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(VaeLoss, Self)> {
        self.weighted_loss_and_grad(x, eps, 1.0)
    }

    /// Gradient of reconstruction + `kl_weight` · KL. The returned loss is
    /// always the unweighted negative ELBO.
    pub fn weighted_loss_and_grad(&self, x: &Tensor<T>, eps: &Tensor<T>, kl_weight: f64) -> Result<(VaeLoss, Self)> {
        self.check_input(x)?;
        self.check_eps(x, eps)?;
        let t = self.trace(x, eps);
        let n = x.batch();
        let loss = negative_elbo(x.data(), t.reconstruction().data(), t.mu.data(), t.logvar.data(), n);
        let mut grad = self.zeros_like();
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let two = T::from_f64_lossy(2.0);
        let half = T::from_f64_lossy(0.5);
        let kl_scale = T::from_f64_lossy(kl_weight) * inv_n;

        // Decoder.
        let d_recon = t.reconstruction().zip_map(x, |r, x| two * (r - x) * inv_n);
        let mut d = sigmoid_backward(t.reconstruction(), &d_recon);
        for i in (0..self.decoder.len()).rev() {
            let input = if i == 0 { &t.seed } else { &t.decoder[i - 1] };
            let dx = self.decoder[i].backward(input, &d, &mut grad.decoder[i], true).unwrap();
            d = relu_backward(input, &dx);
        }
        let d_seed = d.reshaped(&[n, self.fc_decode.outputs()]).expect("flatten seed grad");
        let dz = self.fc_decode.backward(&t.z, &d_seed, &mut grad.fc_decode);

        // Reparameterisation and KL.
        let mut dmu = dz.clone();
        let mut dlogvar = dz;
        for i in 0..dmu.len() {
            let (m, lv) = (t.mu.data()[i], t.logvar.data()[i]);
            let e = eps.data()[i];
            dmu.data_mut()[i] += m * kl_scale;
            let dz_i = dlogvar.data()[i];
            dlogvar.data_mut()[i] = dz_i * e * half * (half * lv).exp() + half * (lv.exp() - T::one()) * kl_scale;
        }

        // Encoder.
        let last = t.encoder.last().unwrap();
        let flat = last.clone().reshaped(&[n, last.item_len()]).expect("flatten");
        let mut dflat = self.fc_mu.backward(&flat, &dmu, &mut grad.fc_mu);
        dflat.add_assign(&self.fc_logvar.backward(&flat, &dlogvar, &mut grad.fc_logvar));
        let mut d = relu_backward(last, &dflat.reshaped(last.shape()).expect("unflatten"));
        for i in (0..self.encoder.len()).rev() {
            let input = if i == 0 { x } else { &t.encoder[i - 1] };
            match self.encoder[i].backward(input, &d, &mut grad.encoder[i], i > 0) {
                Some(dx) => d = relu_backward(input, &dx),
                None => break,
            }
        }
        Ok((loss, grad))
    }

    fn check_eps(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<()> {
        if eps.shape() != [x.batch(), self.arch.latent_dim] {
            return Err(Error::Shape(format!(
                "noise must be [{}, {}], got {:?}",
                x.batch(),
                self.arch.latent_dim,
                eps.shape()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Model<T> for Vae<T> {
    type Arch = VaeArch;
    const KIND: &'static str = "vae";

    fn build(arch: &VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = arch.spatial_sizes();
        let mut encoder = Vec::new();
        let mut in_c = 1;
        for &c in &arch.channels {
            encoder.push(Conv2d::new(in_c, c, arch.kernel, STRIDE, PADDING, &mut rng));
            in_c = c;
        }
        let bottleneck = arch.bottleneck_len();
        let fc_mu = Linear::new(bottleneck, arch.latent_dim, &mut rng);
        let mut fc_logvar = Linear::new(bottleneck, arch.latent_dim, &mut rng);
        // Start near unit posterior variance.
        fc_logvar.weight = fc_logvar.weight.map(|w| w * T::from_f64_lossy(0.1));
        let fc_decode = Linear::new(arch.latent_dim, bottleneck, &mut rng);
        let mut decoder = Vec::new();
        let widths: Vec<usize> = std::iter::once(1).chain(arch.channels.iter().copied()).collect();
        for i in (0..arch.channels.len()).rev() {
            let (big, small) = (sizes[i], sizes[i + 1]);
            let base = (small - 1) * STRIDE + arch.kernel - 2 * PADDING;
            decoder.push(ConvTranspose2d::new(
                widths[i + 1],
                widths[i],
                arch.kernel,
                STRIDE,
                PADDING,
                big - base,
                &mut rng,
            ));
        }
        Ok(Self {
            arch: arch.clone(),
            encoder,
            fc_mu,
            fc_logvar,
            fc_decode,
            decoder,
        })
    }

    fn arch(&self) -> &VaeArch {
        &self.arch
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(Conv2d::zeros_like).collect(),
            fc_mu: self.fc_mu.zeros_like(),
            fc_logvar: self.fc_logvar.zeros_like(),
            fc_decode: self.fc_decode.zeros_like(),
            decoder: self.decoder.iter().map(ConvTranspose2d::zeros_like).collect(),
        }
    }

    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        for (name, l) in [
            ("fc_mu", &self.fc_mu),
            ("fc_logvar", &self.fc_logvar),
            ("fc_decode", &self.fc_decode),
        ] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.weight"), &l.weight));
            out.push((format!("decoder.{i}.bias"), &l.bias));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut l.weight));
            out.push((format!("encoder.{i}.bias"), &mut l.bias));
        }
        for (name, l) in [
            ("fc_mu", &mut self.fc_mu),
            ("fc_logvar", &mut self.fc_logvar),
            ("fc_decode", &mut self.fc_decode),
        ] {
            out.push((format!("{name}.weight"), &mut l.weight));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{i}.weight"), &mut l.weight));
            out.push((format!("decoder.{i}.bias"), &mut l.bias));
        }
        out
    }
}
