//! Adversarial autoencoder at a fixed resolution.
//!
//! The encoder is a deterministic map from images to `k` latent features,
//! the decoder maps latents back to `[0, 1]` pixels, and the discriminator
//! scores latents as prior draws (high) or encoder outputs (low). Training
//! alternates a denoising reconstruction phase with an adversarial
//! regularization phase that matches encoder outputs to the prior.

use std::collections::BTreeMap;

use exemplar_nn::{
    loss, Adam, BatchNorm2d, Chain, Conv2d, Dense, Layer, LeakyRelu, MaxPool2d, MinibatchDiscrimination, Param, Relu,
    Reshape, ResizeNearest, Sequential, Sigmoid, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;

/// Inference batch size for encode/decode of many inputs.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance divided by `sqrt(k)`.
    pub fn normalized_distance(&self, other: &LatentCode) -> f64 {
        let sq: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum();
        (sq / self.0.len().max(1) as f64).sqrt()
    }

    pub fn stack(codes: &[LatentCode]) -> Result<Tensor> {
        let k = codes.first().map(LatentCode::dim).unwrap_or(0);
        let mut data = Vec::with_capacity(codes.len() * k);
        for c in codes {
            if c.dim() != k {
                return Err(Error::Shape(format!("latent batch mixes length {k} and {}", c.dim())));
            }
            data.extend_from_slice(&c.0);
        }
        Ok(Tensor::from_vec(&[codes.len(), k], data)?)
    }

    pub fn unstack(t: &Tensor) -> Vec<LatentCode> {
        let k = t.dim(1);
        t.data().chunks(k).map(|r| LatentCode(r.to_vec())).collect()
    }
}

/// Prior over the latent space: an isotropic Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Gaussian { mean: Vec<f64>, scale: f64 },
}

impl PriorSpec {
    pub fn standard(k: usize) -> Self {
        PriorSpec::Gaussian { mean: vec![0.0; k], scale: 1.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// Mean and standard deviation of coordinate `i`.
    pub fn marginal(&self, i: usize) -> (f64, f64) {
        match self {
            PriorSpec::Gaussian { mean, scale } => (mean[i], *scale),
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentCode {
        match self {
            PriorSpec::Gaussian { mean, scale } => LatentCode(
                mean.iter()
                    .map(|m| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + scale * e
                    })
                    .collect(),
            ),
        }
    }

    pub fn log_density(&self, z: &LatentCode) -> f64 {
        match self {
            PriorSpec::Gaussian { mean, scale } => {
                let k = mean.len() as f64;
                let sq: f64 = z.0.iter().zip(mean).map(|(a, m)| ((a - m) / scale).powi(2)).sum();
                -0.5 * sq - k * (scale.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
            }
        }
    }
}

pub fn sample_prior<R: Rng + ?Sized>(prior: &PriorSpec, count: usize, rng: &mut R) -> Vec<LatentCode> {
    (0..count).map(|_| prior.sample_one(rng)).collect()
}

/// Minibatch discrimination shape: `kernels` (B) projections of `dims` (C).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MbdConfig {
    pub kernels: usize,
    pub dims: usize,
}

impl Default for MbdConfig {
    fn default() -> Self {
        Self { kernels: 16, dims: 5 }
    }
}

/// Closeness features for a `batch x f` matrix under a `f x (B*C)` kernel.
pub fn minibatch_features(features: &Tensor, kernel: &Tensor, cfg: MbdConfig) -> Result<Tensor> {
    if cfg.kernels == 0 || cfg.dims == 0 {
        return Err(Error::Config("minibatch discrimination needs B >= 1 and C >= 1".into()));
    }
    Ok(exemplar_nn::minibatch_features(features, kernel, cfg.kernels, cfg.dims)?.0)
}

/// Everything needed to rebuild an [`AaeModel`]'s architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaeSpec {
    pub latent_dim: usize,
    pub channels: usize,
    pub base_resolution: usize,
    /// 1-based; the encoder and decoder each hold this many blocks.
    pub stage_index: usize,
    /// Filters of each block, indexed from the block nearest the latent space.
    pub filters: Vec<usize>,
    pub disc_width: usize,
    pub mbd: MbdConfig,
    pub bn_momentum: f64,
    pub kernel_size: usize,
    /// Stride of the first convolution in every block. With stride above 1
    /// the pooling/upsampling still restores the per-block resolution, but
    /// the dense head size changes between stages and is not transferable.
    pub conv_stride: usize,
    pub leaky_slope: f64,
    pub prior: PriorSpec,
    /// Prior draws that accompany a code when it is scored on its own, so
    /// the minibatch features see a batch of training size.
    #[serde(default = "default_score_context")]
    pub score_context: usize,
}

fn default_score_context() -> usize {
    31
}

const SCORE_CONTEXT_SEED: u64 = 0x5C02E;

impl AaeSpec {
    pub fn resolution(&self) -> usize {
        level_resolution(self.base_resolution, self.stage_index)
    }

    /// Spatial side of the latent-adjacent feature map.
    pub fn bottleneck(&self) -> usize {
        self.base_resolution.div_ceil(2)
    }

    fn validate(&self) -> Result<()> {
        if self.stage_index == 0 || self.filters.len() < self.stage_index {
            return Err(Error::Config(format!(
                "stage {} needs {} filter counts, have {}",
                self.stage_index,
                self.stage_index,
                self.filters.len()
            )));
        }
        if self.latent_dim == 0 || self.base_resolution < 2 {
            return Err(Error::Config("latent_dim >= 1 and base_resolution >= 2 required".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("unsupported channel count {}", self.channels)));
        }
        if self.prior.dim() != self.latent_dim {
            return Err(Error::Config("prior dimension differs from latent_dim".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.conv_stride == 0 {
            return Err(Error::Config("kernel size must be odd and stride positive".into()));
        }
        Ok(())
    }
}

/// Resolution handled by block `level` (1-based).
pub fn level_resolution(base: usize, level: usize) -> usize {
    base << (level - 1)
}

fn conv<R: Rng + ?Sized>(spec: &AaeSpec, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Layer {
    Layer::Conv2d(Conv2d::new(cin, cout, spec.kernel_size, stride, spec.kernel_size / 2, rng))
}

/// Encoder block at `level`: two conv/batch-norm/ReLU triples, then 2x max-pooling.
pub fn encoder_block<R: Rng + ?Sized>(spec: &AaeSpec, level: usize, rng: &mut R) -> Sequential {
    let f = spec.filters[level - 1];
    let f_out = if level == 1 { f } else { spec.filters[level - 2] };
    Sequential::new(vec![
        conv(spec, f, f, spec.conv_stride, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(f, spec.bn_momentum)),
        Layer::Relu(Relu::default()),
        conv(spec, f, f_out, 1, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(f_out, spec.bn_momentum)),
        Layer::Relu(Relu::default()),
        Layer::MaxPool2d(MaxPool2d::default()),
    ])
}

/// Decoder block at `level`: two conv/batch-norm/ReLU triples, then
/// nearest-neighbour upsampling to the level's resolution.
pub fn decoder_block<R: Rng + ?Sized>(spec: &AaeSpec, level: usize, rng: &mut R) -> Sequential {
    let f = spec.filters[level - 1];
    let f_in = if level == 1 { f } else { spec.filters[level - 2] };
    let res = level_resolution(spec.base_resolution, level);
    Sequential::new(vec![
        conv(spec, f_in, f, spec.conv_stride, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(f, spec.bn_momentum)),
        Layer::Relu(Relu::default()),
        conv(spec, f, f, 1, rng),
        Layer::BatchNorm2d(BatchNorm2d::new(f, spec.bn_momentum)),
        Layer::Relu(Relu::default()),
        Layer::Resize(ResizeNearest::new(res, res)),
    ])
}

/// Latent discriminator: dense, leaky ReLU, minibatch closeness features,
/// dense, leaky ReLU, single sigmoid unit.
pub fn discriminator<R: Rng + ?Sized>(spec: &AaeSpec, rng: &mut R) -> Sequential {
    let w = spec.disc_width;
    Sequential::new(vec![
        Layer::Dense(Dense::new(spec.latent_dim, w, rng)),
        Layer::LeakyRelu(LeakyRelu::new(spec.leaky_slope)),
        Layer::Minibatch(MinibatchDiscrimination::new(w, spec.mbd.kernels, spec.mbd.dims, rng)),
        Layer::Dense(Dense::new(w + spec.mbd.kernels, w, rng)),
        Layer::LeakyRelu(LeakyRelu::new(spec.leaky_slope)),
        Layer::Dense(Dense::new(w, 1, rng)),
        Layer::Sigmoid(Sigmoid::default()),
    ])
}

#[derive(Clone, Debug)]
pub struct AaeModel {
    pub spec: AaeSpec,
    /// Parts: `from_rgb`, `block{s}` .. `block1`, `head`.
    pub encoder: Chain,
    /// Parts: `stem`, `block1` .. `block{s}`, `to_rgb`.
    pub decoder: Chain,
    pub discriminator: Sequential,
}

/// Optimizer state for the three parameter groups.
#[derive(Clone, Debug)]
pub struct OptState {
    pub autoencoder: Adam,
    pub discriminator: Adam,
    pub generator: Adam,
}

impl OptState {
    pub fn new(lr_ae: f64, lr_disc: f64, lr_gen: f64) -> Self {
        Self {
            autoencoder: Adam::with_betas(lr_ae, 0.5, 0.999),
            discriminator: Adam::with_betas(lr_disc, 0.5, 0.999),
            generator: Adam::with_betas(lr_gen, 0.5, 0.999),
        }
    }
}

fn check_finite(value: f64, stage: usize, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { stage, step: step as usize, what: format!("{what} is {value}") })
    }
}

impl AaeModel {
    /// Freshly initialized model for `spec`.
    pub fn new<R: Rng + ?Sized>(spec: AaeSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let s = spec.stage_index;
        let res = spec.resolution();
        let c = spec.channels;
        let b = spec.bottleneck();
        let f1 = spec.filters[0];

        let mut encoder = Chain::new();
        encoder
            .push("from_rgb", Sequential::new(vec![Layer::Conv2d(Conv2d::new(c, spec.filters[s - 1], 1, 1, 0, rng))]));
        for level in (1..=s).rev() {
            encoder.push(format!("block{level}"), encoder_block(&spec, level, rng));
        }
        let probe = encoder.infer(&Tensor::zeros(&[1, c, res, res]))?;
        let flat = probe.len();
        encoder.push(
            "head",
            Sequential::new(vec![
                Layer::Reshape(Reshape::new(&[flat])),
                Layer::Dense(Dense::new(flat, spec.latent_dim, rng)),
            ]),
        );

        let mut decoder = Chain::new();
        decoder.push(
            "stem",
            Sequential::new(vec![
                Layer::Dense(Dense::new(spec.latent_dim, f1 * b * b, rng)),
                Layer::Reshape(Reshape::new(&[f1, b, b])),
            ]),
        );
        for level in 1..=s {
            decoder.push(format!("block{level}"), decoder_block(&spec, level, rng));
        }
        decoder.push(
            "to_rgb",
            Sequential::new(vec![
                Layer::Conv2d(Conv2d::new(spec.filters[s - 1], c, 1, 1, 0, rng)),
                Layer::Sigmoid(Sigmoid::default()),
            ]),
        );

        let discriminator = discriminator(&spec, rng);
        Ok(Self { spec, encoder, decoder, discriminator })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution()
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.resolution(), self.resolution(), self.spec.channels)
    }

    /// Encoder plus decoder parameter count (running statistics excluded).
    pub fn autoencoder_param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.autoencoder_param_count() + self.discriminator.param_count()
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.dims() != self.input_dims() {
            return Err(Error::Shape(format!("model expects {:?} images, got {:?}", self.input_dims(), img.dims())));
        }
        Ok(())
    }

    fn check_code(&self, z: &LatentCode) -> Result<()> {
        if z.dim() != self.latent_dim() {
            return Err(Error::Shape(format!("latent code has length {}, model uses {}", z.dim(), self.latent_dim())));
        }
        Ok(())
    }

    pub fn encode(&self, img: &Image) -> Result<LatentCode> {
        Ok(self.encode_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            for img in chunk {
                self.check_image(img)?;
            }
            out.extend(LatentCode::unstack(&self.encoder.infer(&Image::batch_tensor(chunk)?)?));
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Image> {
        Ok(self.decode_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn decode_batch(&self, codes: &[LatentCode]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(INFER_CHUNK) {
            for z in chunk {
                self.check_code(z)?;
            }
            out.extend(Image::from_batch_tensor(&self.decoder.infer(&LatentCode::stack(chunk)?)?)?);
        }
        Ok(out)
    }

    /// Probability that each code is a prior draw. The batch is scored
    /// jointly because minibatch features depend on the whole batch.
    pub fn discriminate(&self, batch: &[LatentCode]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Invalid("discriminator needs a nonempty batch".into()));
        }
        for z in batch {
            self.check_code(z)?;
        }
        Ok(self.discriminator.infer(&LatentCode::stack(batch)?)?.into_data())
    }

    /// Fixed prior draws used as the minibatch context in [`Self::validity_scores`].
    pub fn score_context_codes(&self) -> Vec<LatentCode> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SCORE_CONTEXT_SEED);
        sample_prior(&self.spec.prior, self.spec.score_context, &mut rng)
    }

    /// Discriminator score of each code taken individually. Each code is
    /// appended to the same fixed batch of prior draws and its own output is
    /// kept, so the score depends on that code alone.
    pub fn validity_scores(&self, codes: &[LatentCode]) -> Result<Vec<f64>> {
        let mut batch = self.score_context_codes();
        batch.push(LatentCode(vec![0.0; self.latent_dim()]));
        let last = batch.len() - 1;
        codes
            .iter()
            .map(|z| {
                self.check_code(z)?;
                let mut b = batch.clone();
                b[last] = z.clone();
                Ok(self.discriminator.infer(&LatentCode::stack(&b)?)?.data()[last])
            })
            .collect()
    }

    pub fn reconstruct_batch(&self, images: &[Image]) -> Result<Vec<Image>> {
        self.decode_batch(&self.encode_batch(images)?)
    }

    /// Pooled root-mean-square pixel error of `decode(encode(x))` against `x`.
    pub fn rmse(&self, images: &[Image]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Invalid("rmse of an empty set".into()));
        }
        let mut recon = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            recon.extend(self.reconstruct_batch(chunk)?);
        }
        Ok(rmse_between(images, &recon))
    }

    /// RMSE grouped by class code; classes without images are omitted.
    pub fn rmse_per_class(&self, ds: &Dataset) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (c, code) in ds.class_codes.iter().enumerate() {
            let imgs: Vec<Image> =
                ds.images.iter().zip(&ds.labels).filter(|(_, &l)| l == c).map(|(i, _)| i.clone()).collect();
            if !imgs.is_empty() {
                out.insert(code.clone(), self.rmse(&imgs)?);
            }
        }
        Ok(out)
    }

    fn encoder_decoder_params(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.discriminator.zero_grad();
    }

    /// Denoising reconstruction loss for `clean` corrupted by the given
    /// `noise` (clipped to `[0, 1]`); accumulates encoder and decoder gradients.
    pub fn reconstruction_loss_grads(&mut self, clean: &Tensor, noise: &Tensor) -> Result<f64> {
        let mut corrupted = clean.clone();
        corrupted.add_assign(noise);
        let corrupted = corrupted.map(|v| v.clamp(0.0, 1.0));
        let z = self.encoder.forward(&corrupted, true)?;
        let out = self.decoder.forward(&z, true)?;
        let (l, g) = loss::mse(&out, clean);
        let dz = self.decoder.backward(&g)?;
        self.encoder.backward(&dz)?;
        Ok(l)
    }

    /// Discriminator loss `0.5 * (BCE(D(prior + n_real), 1) + BCE(D(E(x) + n_fake), 0))`;
    /// accumulates discriminator gradients only.
    pub fn discriminator_loss_grads(
        &mut self,
        prior_codes: &Tensor,
        clean: &Tensor,
        noise_real: &Tensor,
        noise_fake: &Tensor,
    ) -> Result<f64> {
        let mut real = prior_codes.clone();
        real.add_assign(noise_real);
        let mut fake = self.encoder.forward(clean, true)?;
        fake.add_assign(noise_fake);

        let p_real = self.discriminator.forward(&real, true)?;
        let (l_real, g) = loss::bce(&p_real, &Tensor::full(p_real.shape(), 1.0));
        self.discriminator.backward(&g.map(|v| 0.5 * v))?;

        let p_fake = self.discriminator.forward(&fake, true)?;
        let (l_fake, g) = loss::bce(&p_fake, &Tensor::zeros(p_fake.shape()));
        self.discriminator.backward(&g.map(|v| 0.5 * v))?;
        Ok(0.5 * (l_real + l_fake))
    }

    /// Non-saturating generator loss `mean(-ln D(E(x) + noise))`; accumulates
    /// encoder gradients (discriminator gradients are cleared afterwards).
    pub fn generator_loss_grads(&mut self, clean: &Tensor, noise: &Tensor) -> Result<f64> {
        let mut z = self.encoder.forward(clean, true)?;
        z.add_assign(noise);
        let p = self.discriminator.forward(&z, true)?;
        let (l, g) = loss::bce(&p, &Tensor::full(p.shape(), 1.0));
        let dz = self.discriminator.backward(&g)?;
        self.discriminator.zero_grad();
        self.encoder.backward(&dz)?;
        Ok(l)
    }

    /// One denoising reconstruction update of encoder and decoder.
    pub fn reconstruction_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Image],
        sigma: f64,
        opt: &mut OptState,
        rng: &mut R,
    ) -> Result<f64> {
        if sigma < 0.0 {
            return Err(Error::Config(format!("noise sigma {sigma} is negative")));
        }
        let clean = Image::batch_tensor(batch)?;
        let noise = if sigma > 0.0 { Tensor::randn(clean.shape(), sigma, rng) } else { Tensor::zeros(clean.shape()) };
        self.zero_grad();
        let l = self.reconstruction_loss_grads(&clean, &noise)?;
        check_finite(l, self.spec.stage_index, opt.autoencoder.steps(), "reconstruction loss")?;
        opt.autoencoder.step(self.encoder_decoder_params());
        Ok(l)
    }

    /// One discriminator update followed by one adversarial encoder update.
    /// Returns `(d_loss, g_loss)`.
    pub fn regularization_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Image],
        prior: &PriorSpec,
        noise_sigma: f64,
        opt: &mut OptState,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Invalid("regularization step needs a nonempty batch".into()));
        }
        let n = batch.len();
        let k = self.latent_dim();
        let clean = Image::batch_tensor(batch)?;
        let prior_codes = LatentCode::stack(&sample_prior(prior, n, rng))?;
        let mut noise = || {
            if noise_sigma > 0.0 {
                Tensor::randn(&[n, k], noise_sigma, rng)
            } else {
                Tensor::zeros(&[n, k])
            }
        };
        let (nr, nf, ng) = (noise(), noise(), noise());
        let stage = self.spec.stage_index;

        self.zero_grad();
        let d = self.discriminator_loss_grads(&prior_codes, &clean, &nr, &nf)?;
        check_finite(d, stage, opt.discriminator.steps(), "discriminator loss")?;
        opt.discriminator.step(self.discriminator.params_mut());

        self.zero_grad();
        let g = self.generator_loss_grads(&clean, &ng)?;
        check_finite(g, stage, opt.generator.steps(), "generator loss")?;
        opt.generator.step(self.encoder.params_mut());
        Ok((d, g))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("aae");
        c.meta.insert("spec".into(), serde_json::to_value(&self.spec)?);
        c.meta.insert("stage_index".into(), self.spec.stage_index.into());
        c.meta.insert("resolution".into(), self.resolution().into());
        c.meta.insert("latent_dim".into(), self.latent_dim().into());
        for (prefix, state) in [("encoder", self.encoder.named_state()), ("decoder", self.decoder.named_state())] {
            for (n, t) in state {
                c.tensors.push((format!("{prefix}.{n}"), t.clone()));
            }
        }
        for (n, t) in self.discriminator.named_state() {
            c.tensors.push((format!("discriminator.{n}"), t.clone()));
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind() != Some("aae") {
            return Err(Error::Checkpoint(format!("expected an aae checkpoint, found {:?}", c.kind())));
        }
        let spec: AaeSpec = c.spec()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(spec, &mut rng)?;
        let lookup = c.lookup();
        m.encoder.load_state(&|n: &str| lookup(&format!("encoder.{n}")))?;
        m.decoder.load_state(&|n: &str| lookup(&format!("decoder.{n}")))?;
        m.discriminator.load_state(&|n: &str| lookup(&format!("discriminator.{n}")))?;
        Ok(m)
    }

    /// Fraction of held-out codes the discriminator classifies correctly
    /// (prior draws at or above 0.5, encoder outputs below).
    pub fn discriminator_accuracy(&self, prior_codes: &[LatentCode], encoded: &[LatentCode]) -> Result<f64> {
        let pr = self.validity_scores(prior_codes)?;
        let en = self.validity_scores(encoded)?;
        let hits = pr.iter().filter(|&&p| p >= 0.5).count() + en.iter().filter(|&&p| p < 0.5).count();
        Ok(hits as f64 / (pr.len() + en.len()) as f64)
    }
}

/// Pooled RMSE between paired image lists.
pub fn rmse_between(a: &[Image], b: &[Image]) -> f64 {
    let mut sq = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.pixels().iter().zip(y.pixels()) {
            sq += (p - q) * (p - q);
        }
        n += x.pixels().len();
    }
    (sq / n.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec(res: usize, k: usize) -> AaeSpec {
        AaeSpec {
            latent_dim: k,
            channels: 3,
            base_resolution: res,
            stage_index: 1,
            filters: vec![4],
            disc_width: 8,
            mbd: MbdConfig { kernels: 3, dims: 2 },
            bn_momentum: 0.95,
            kernel_size: 3,
            conv_stride: 1,
            leaky_slope: 0.2,
            prior: PriorSpec::standard(k),
            score_context: 7,
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = AaeModel::new(tiny_spec(8, 4), &mut rng).unwrap();
        let img = Image::filled(8, 8, 3, 0.4).unwrap();
        let z = m.encode(&img).unwrap();
        assert_eq!(z.dim(), 4);
        assert_eq!(m.encode(&img).unwrap(), z);
        let out = m.decode(&sample_prior(&m.spec.prior, 1, &mut rng)[0]).unwrap();
        assert_eq!(out.dims(), (8, 8, 3));
        assert!(m.decode(&LatentCode(vec![0.0; 3])).is_err());
        assert!(m.encode(&Image::filled(7, 7, 3, 0.1).unwrap()).is_err());
        let scores = m.discriminate(&sample_prior(&m.spec.prior, 5, &mut rng)).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(m.discriminate(&[z]).unwrap().len(), 1);
        assert!(m.discriminate(&[]).is_err());
    }

    #[test]
    fn odd_base_resolution_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = tiny_spec(7, 4);
        spec.stage_index = 3;
        spec.filters = vec![4, 4, 4];
        let m = AaeModel::new(spec, &mut rng).unwrap();
        let img = Image::filled(28, 28, 3, 0.2).unwrap();
        assert_eq!(m.reconstruct_batch(&[img]).unwrap()[0].dims(), (28, 28, 3));
    }

    #[test]
    fn rmse_examples() {
        let ones = vec![Image::filled(4, 4, 3, 1.0).unwrap(); 3];
        let halves = vec![Image::filled(4, 4, 3, 0.5).unwrap(); 3];
        assert_eq!(rmse_between(&ones, &ones), 0.0);
        assert_eq!(rmse_between(&ones, &halves), 0.5);
    }

    #[test]
    fn prior_sampling() {
        let p = PriorSpec::standard(256);
        let a = sample_prior(&p, 5, &mut ChaCha8Rng::seed_from_u64(2));
        let b = sample_prior(&p, 5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert!(a.iter().all(|z| z.dim() == 256));
        let ld = PriorSpec::standard(1).log_density(&LatentCode(vec![0.0]));
        assert!((ld + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn confused_discriminator_loss_is_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = AaeModel::new(tiny_spec(8, 4), &mut rng).unwrap();
        // Zero final weights and bias make D output exactly 0.5.
        if let Layer::Dense(d) = &mut m.discriminator.layers[5] {
            d.weight.value.fill(0.0);
            d.bias.value.fill(0.0);
        }
        let clean = Image::batch_tensor(&vec![Image::filled(8, 8, 3, 0.3).unwrap(); 4]).unwrap();
        let codes = LatentCode::stack(&sample_prior(&m.spec.prior, 4, &mut rng)).unwrap();
        let z = Tensor::zeros(&[4, 4]);
        let d = m.discriminator_loss_grads(&codes, &clean, &z, &z).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
