//! The complete network: text encoder, posterior encoder `Q(Z|X,Y)`, Glow
//! prior `P(Z|X)`, decoder `P(Y|Z,X)`, length predictor, and the training
//! loss.
//!
//! Frame-level sequences run at the reduced length `N_r = ⌈N / r⌉`, where
//! `r` consecutive spectrogram frames are stacked along the feature axis.
//! One posterior input layer and one decoder output head exist per
//! scheduled `r`; only the active pair is touched in a given pass.

use crate::attention::{
    add_positions, causal_mask, run_decoder_stack, AttentionConfig, AttentionWeights, DecoderBlock, SelfAttentionBlock,
};
use crate::error::{Error, Result};
use crate::glow::{GlowPrior, LatentSample};
use crate::nn::{BatchNorm, Conv1d, Ctx, Embedding, Init, Linear, ParamStore};
use crate::tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const LENGTH_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub prenet_layers: usize,
    pub prenet_kernel: usize,
    pub prenet_filters: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub text_blocks: usize,
    pub posterior_blocks: usize,
    pub decoder_blocks: usize,
    pub d_z: usize,
    pub flow_blocks: usize,
    pub coupling_blocks: usize,
    pub n_bins: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub postnet_channels: usize,
    /// Reduction factors that get their own posterior input layer and output head.
    pub reduction_factors: Vec<usize>,
    /// Causal self-attention on frame-level sequences (posterior, prior, decoder).
    pub causal_mask: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Dimensions of the LJSpeech-scale reference setup.
    pub fn full_scale() -> Self {
        Self {
            vocab_size: 43,
            embed_dim: 512,
            prenet_layers: 5,
            prenet_kernel: 5,
            prenet_filters: 512,
            d_model: 256,
            n_heads: 4,
            d_ffn: 1024,
            dropout: 0.1,
            text_blocks: 4,
            posterior_blocks: 2,
            decoder_blocks: 2,
            d_z: 128,
            flow_blocks: 6,
            coupling_blocks: 2,
            n_bins: 80,
            postnet_layers: 5,
            postnet_kernel: 5,
            postnet_channels: 512,
            reduction_factors: vec![2, 3, 4, 5],
            causal_mask: true,
            seed: 0,
        }
    }

    /// Desktop default: same topology, narrower layers, three flow blocks.
    pub fn desk() -> Self {
        Self {
            vocab_size: 12,
            embed_dim: 64,
            prenet_filters: 64,
            d_model: 64,
            d_ffn: 128,
            d_z: 32,
            flow_blocks: 3,
            n_bins: 16,
            postnet_channels: 32,
            ..Self::full_scale()
        }
    }

    /// Smallest width that still exercises every component; used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 6,
            embed_dim: 8,
            prenet_layers: 2,
            prenet_kernel: 3,
            prenet_filters: 8,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            dropout: 0.0,
            text_blocks: 2,
            posterior_blocks: 1,
            decoder_blocks: 1,
            d_z: 4,
            flow_blocks: 2,
            coupling_blocks: 1,
            n_bins: 3,
            postnet_layers: 2,
            postnet_kernel: 3,
            postnet_channels: 4,
            reduction_factors: vec![1, 2],
            causal_mask: true,
            seed: 0,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            dropout_rate: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even for positional encoding".into()));
        }
        if !self.d_z.is_multiple_of(2) || self.d_z == 0 {
            return Err(Error::Config(format!("d_z must be even and positive, got {}", self.d_z)));
        }
        if self.reduction_factors.is_empty() || self.reduction_factors.contains(&0) {
            return Err(Error::Config("reduction factors must be nonempty and >= 1".into()));
        }
        if self.prenet_kernel.is_multiple_of(2) || self.postnet_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        Ok(())
    }
}

/// Encoded text `X`, `[M, d_model]`.
#[derive(Clone, Debug)]
pub struct LinguisticFeature {
    pub x: Var,
    pub char_ids: Vec<usize>,
}

impl LinguisticFeature {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }
}

/// Diagonal Gaussian `Q(Z|X,Y)` per reduced frame.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorParams {
    pub mean: Var,
    pub log_var: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon_mse: f64,
    pub kl: f64,
    pub length_loss: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub struct LossOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub attention: Vec<AttentionWeights>,
    pub posterior_attention: Vec<AttentionWeights>,
    pub posterior: PosteriorParams,
    pub latent: LatentSample,
}

pub struct DecoderOutput {
    /// Before the PostNet residual, `[N_r·r, n_bins]` (or trimmed to the target).
    pub pre: Var,
    pub post: Var,
    pub attention: Vec<AttentionWeights>,
}

pub struct LengthPrediction {
    pub total: Var,
    pub per_char_log: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Zeros,
    Sample { seed: u64 },
}

pub struct Synthesis {
    pub spectrogram: Tensor,
    pub attention: Vec<AttentionWeights>,
    pub predicted_frames: f64,
    pub frames: usize,
    pub reduced_frames: usize,
}

/// Stack `r` consecutive frames along the feature axis, zero-padding `N` up to a multiple of `r`.
pub fn reduce_spectrogram(y: &Tensor, r: usize) -> Result<Tensor> {
    let (n, bins) = y.dims2()?;
    if r == 0 {
        return Err(Error::Config("reduction factor must be >= 1".into()));
    }
    let nr = n.div_ceil(r);
    let mut data = y.data().to_vec();
    data.resize(nr * r * bins, 0.0);
    Tensor::new(vec![nr, r * bins], data)
}

/// Inverse of [`reduce_spectrogram`], trimming back to `n` frames.
pub fn expand_spectrogram(y: &Tensor, r: usize, n: usize) -> Result<Tensor> {
    let (nr, width) = y.dims2()?;
    if r == 0 || width % r != 0 || n > nr * r {
        return Err(Error::Shape {
            op: "expand_spectrogram",
            lhs: y.shape().to_vec(),
            rhs: vec![r, n],
        });
    }
    let bins = width / r;
    Tensor::new(vec![n, bins], y.data()[..n * bins].to_vec())
}

pub fn reparam_sample(ctx: &Ctx, p: &PosteriorParams, noise: Var) -> Result<LatentSample> {
    let t = &ctx.tape;
    if t.shape(noise) != t.shape(p.mean) {
        return Err(Error::Shape {
            op: "reparam_sample",
            lhs: t.shape(noise),
            rhs: t.shape(p.mean),
        });
    }
    let std = t.exp(t.scale(p.log_var, 0.5));
    let z = t.add(p.mean, t.mul(std, noise)?)?;
    Ok(LatentSample { z, log_density: None })
}

/// Analytic `log Q(z)` under the diagonal Gaussian, summed over all elements.
pub fn posterior_log_density(ctx: &Ctx, p: &PosteriorParams, z: Var) -> Result<Var> {
    let t = &ctx.tape;
    let n = t.value(z).len() as f64;
    let diff = t.sub(z, p.mean)?;
    let maha = t.mul(t.square(diff), t.exp(t.neg(p.log_var)))?;
    let s = t.add(t.sum(maha), t.sum(p.log_var))?;
    Ok(t.add_scalar(t.scale(s, -0.5), -0.5 * n * (2.0 * PI).ln()))
}

/// Single-sample Monte-Carlo KL: `log Q(z) - log P(z | X)`.
pub fn kl_estimate(ctx: &Ctx, p: &PosteriorParams, z: &LatentSample, x: &LinguisticFeature, prior: &GlowPrior) -> Result<Var> {
    let log_q = posterior_log_density(ctx, p, z.z)?;
    let log_p = match z.log_density {
        Some(v) => v,
        None => prior.log_density(ctx, z.z, x.x)?,
    };
    ctx.tape.sub(log_q, log_p)
}

pub struct Vaenar {
    pub cfg: ModelConfig,
    embedding: Embedding,
    prenet: Vec<(Conv1d, BatchNorm)>,
    prenet_proj: Linear,
    text_blocks: Vec<SelfAttentionBlock>,
    posterior_in: BTreeMap<usize, Linear>,
    posterior_fc2: Linear,
    posterior_blocks: Vec<DecoderBlock>,
    posterior_mean: Linear,
    posterior_log_var: Linear,
    pub prior: GlowPrior,
    decoder_in: Linear,
    decoder_blocks: Vec<DecoderBlock>,
    decoder_heads: BTreeMap<usize, Linear>,
    postnet: Vec<Conv1d>,
    length_head: Linear,
}

impl Vaenar {
    /// Builds the network, registering freshly initialized parameters in `store`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let att = cfg.attention();
        let d = cfg.d_model;

        let embedding = Embedding::new(store, "text.embedding", cfg.vocab_size, cfg.embed_dim, rng);
        let mut prenet = Vec::with_capacity(cfg.prenet_layers);
        let mut width = cfg.embed_dim;
        for i in 0..cfg.prenet_layers {
            let conv = Conv1d::new(store, &format!("text.prenet{i}.conv"), cfg.prenet_kernel, width, cfg.prenet_filters, rng)?;
            let bn = BatchNorm::new(store, &format!("text.prenet{i}.bn"), cfg.prenet_filters);
            prenet.push((conv, bn));
            width = cfg.prenet_filters;
        }
        let prenet_proj = Linear::new(store, "text.proj", width, d, Init::XavierUniform, rng);
        let text_blocks = (0..cfg.text_blocks)
            .map(|i| SelfAttentionBlock::new(store, &format!("text.block{i}"), &att, rng))
            .collect::<Result<Vec<_>>>()?;

        let posterior_in = cfg
            .reduction_factors
            .iter()
            .map(|&r| (r, Linear::new(store, &format!("posterior.in_r{r}"), cfg.n_bins * r, d, Init::XavierUniform, rng)))
            .collect();
        let posterior_fc2 = Linear::new(store, "posterior.fc2", d, d, Init::XavierUniform, rng);
        let posterior_blocks = (0..cfg.posterior_blocks)
            .map(|i| DecoderBlock::new(store, &format!("posterior.block{i}"), &att, rng))
            .collect::<Result<Vec<_>>>()?;
        let posterior_mean = Linear::new(store, "posterior.mean", d, cfg.d_z, Init::XavierUniform, rng);
        let posterior_log_var = Linear::new(store, "posterior.log_var", d, cfg.d_z, Init::XavierUniform, rng);

        let prior = GlowPrior::new(store, "prior", cfg.d_z, cfg.flow_blocks, cfg.coupling_blocks, &att, cfg.causal_mask, rng)?;

        let decoder_in = Linear::new(store, "decoder.in", cfg.d_z, d, Init::XavierUniform, rng);
        let decoder_blocks = (0..cfg.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("decoder.block{i}"), &att, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_heads = cfg
            .reduction_factors
            .iter()
            .map(|&r| (r, Linear::new(store, &format!("decoder.head_r{r}"), d, cfg.n_bins * r, Init::XavierUniform, rng)))
            .collect();
        let mut postnet = Vec::with_capacity(cfg.postnet_layers);
        for i in 0..cfg.postnet_layers {
            let cin = if i == 0 { cfg.n_bins } else { cfg.postnet_channels };
            let cout = if i + 1 == cfg.postnet_layers { cfg.n_bins } else { cfg.postnet_channels };
            postnet.push(Conv1d::new(store, &format!("decoder.postnet{i}"), cfg.postnet_kernel, cin, cout, rng)?);
        }
        let length_head = Linear::new(store, "length.proj", d, 1, Init::XavierUniform, rng);
        // Start every character at a positive log-duration so the ReLU is live.
        if let Some(b) = store.get_mut("length.proj.bias") {
            b.data_mut()[0] = LENGTH_BIAS_INIT;
        }

        Ok(Self {
            cfg,
            embedding,
            prenet,
            prenet_proj,
            text_blocks,
            posterior_in,
            posterior_fc2,
            posterior_blocks,
            posterior_mean,
            posterior_log_var,
            prior,
            decoder_in,
            decoder_blocks,
            decoder_heads,
            postnet,
            length_head,
        })
    }

    fn frame_mask(&self, frames: usize) -> Option<crate::tensor::Mask> {
        self.cfg.causal_mask.then(|| causal_mask(frames))
    }

    pub fn encode_text(&self, ctx: &Ctx, char_ids: &[usize]) -> Result<LinguisticFeature> {
        if char_ids.is_empty() {
            return Err(Error::Input("empty text".into()));
        }
        let t = &ctx.tape;
        let mut h = self.embedding.forward(ctx, char_ids)?;
        for (conv, bn) in &self.prenet {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = t.relu(h);
            h = ctx.dropout(h, self.cfg.dropout)?;
        }
        let mut x = add_positions(ctx, self.prenet_proj.forward(ctx, h)?)?;
        for b in &self.text_blocks {
            x = b.forward(ctx, x, None)?;
        }
        Ok(LinguisticFeature {
            x,
            char_ids: char_ids.to_vec(),
        })
    }

    pub fn posterior_encode(&self, ctx: &Ctx, y_reduced: &Tensor, x: &LinguisticFeature, r: usize) -> Result<PosteriorParams> {
        Ok(self.posterior_encode_with_attention(ctx, y_reduced, x, r)?.0)
    }

    /// [`Self::posterior_encode`] plus the cross-attention of every posterior block.
    pub fn posterior_encode_with_attention(
        &self,
        ctx: &Ctx,
        y_reduced: &Tensor,
        x: &LinguisticFeature,
        r: usize,
    ) -> Result<(PosteriorParams, Vec<AttentionWeights>)> {
        let t = &ctx.tape;
        let input = self
            .posterior_in
            .get(&r)
            .ok_or_else(|| Error::Config(format!("no posterior input layer for r = {r}")))?;
        let (frames, width) = y_reduced.dims2()?;
        if width != input.in_dim {
            return Err(Error::Shape {
                op: "posterior_encode",
                lhs: y_reduced.shape().to_vec(),
                rhs: vec![input.in_dim],
            });
        }
        let y = ctx.constant(y_reduced.clone());
        let h = t.relu(input.forward(ctx, y)?);
        let h = ctx.dropout(h, self.cfg.dropout)?;
        let h = t.relu(self.posterior_fc2.forward(ctx, h)?);
        let h = ctx.dropout(h, self.cfg.dropout)?;
        let h = add_positions(ctx, h)?;
        let mask = self.frame_mask(frames);
        let (h, attention) = run_decoder_stack(ctx, &self.posterior_blocks, h, x.x, mask.as_ref())?;
        let mean = self.posterior_mean.forward(ctx, h)?;
        let log_var = t.clamp(self.posterior_log_var.forward(ctx, h)?, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((PosteriorParams { mean, log_var }, attention))
    }

    /// Decodes reduced latents into `[N_r·r, n_bins]` frames, trimmed to
    /// `target_frames` when given.
    pub fn decode_spectrogram(&self, ctx: &Ctx, z: Var, x: &LinguisticFeature, r: usize, target_frames: Option<usize>) -> Result<DecoderOutput> {
        let t = &ctx.tape;
        let head = self
            .decoder_heads
            .get(&r)
            .ok_or_else(|| Error::Config(format!("no decoder projection head for r = {r}")))?;
        let frames = t.shape(z)[0];
        if frames == 0 {
            return Err(Error::Input("latent sequence is empty".into()));
        }
        let h = add_positions(ctx, self.decoder_in.forward(ctx, z)?)?;
        let mask = self.frame_mask(frames);
        let (h, attention) = run_decoder_stack(ctx, &self.decoder_blocks, h, x.x, mask.as_ref())?;
        let stacked = head.forward(ctx, h)?;
        let mut pre = t.reshape(stacked, &[frames * r, self.cfg.n_bins])?;
        if let Some(n) = target_frames {
            pre = t.slice_rows(pre, 0, n)?;
        }
        let mut res = pre;
        for (i, conv) in self.postnet.iter().enumerate() {
            res = conv.forward(ctx, res)?;
            if i + 1 < self.postnet.len() {
                res = t.tanh(res);
                res = ctx.dropout(res, self.cfg.dropout)?;
            }
        }
        let post = if self.postnet.is_empty() { pre } else { t.add(pre, res)? };
        Ok(DecoderOutput { pre, post, attention })
    }

    /// Per-character log-durations `ReLU(linear(x_j))` on a detached copy of
    /// `X`, and their exponentiated sum.
    pub fn predict_length(&self, ctx: &Ctx, x: &LinguisticFeature) -> Result<LengthPrediction> {
        let t = &ctx.tape;
        let xd = t.detach(x.x);
        let out = t.relu(self.length_head.forward(ctx, xd)?);
        let per_char_log = t.reshape(out, &[x.len()])?;
        let total = t.sum(t.exp(per_char_log));
        Ok(LengthPrediction { total, per_char_log })
    }

    /// Training objective for one utterance at reduction factor `r`:
    /// `recon + alpha·KL + beta·(log N - log N̂)²`.
    #[allow(clippy::too_many_arguments)]
    pub fn compute_loss(
        &self,
        ctx: &Ctx,
        char_ids: &[usize],
        y: &Tensor,
        noise: &Tensor,
        r: usize,
        alpha: f64,
        beta: f64,
    ) -> Result<LossOutput> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        let t = &ctx.tape;
        let (n, _) = y.dims2()?;
        if n == 0 {
            return Err(Error::Input("empty spectrogram".into()));
        }
        let x = self.encode_text(ctx, char_ids)?;
        let y_red = reduce_spectrogram(y, r)?;
        let (posterior, posterior_attention) = self.posterior_encode_with_attention(ctx, &y_red, &x, r)?;
        let latent = reparam_sample(ctx, &posterior, ctx.constant(noise.clone()))?;
        let kl = kl_estimate(ctx, &posterior, &latent, &x, &self.prior)?;
        let dec = self.decode_spectrogram(ctx, latent.z, &x, r, Some(n))?;
        let target = ctx.constant(y.clone());
        let mse_pre = t.mean(t.square(t.sub(dec.pre, target)?));
        let mse_post = t.mean(t.square(t.sub(dec.post, target)?));
        let recon = t.add(mse_pre, mse_post)?;
        let len = self.predict_length(ctx, &x)?;
        let log_diff = t.add_scalar(t.neg(t.log(len.total)), (n as f64).ln());
        let length_loss = t.square(log_diff);
        let total = t.add(t.add(recon, t.scale(kl, alpha))?, t.scale(length_loss, beta))?;
        let (rv, kv, lv) = (t.value(recon).item(), t.value(kl).item(), t.value(length_loss).item());
        let breakdown = LossBreakdown {
            recon_mse: rv,
            kl: kv,
            length_loss: lv,
            total: t.value(total).item(),
            alpha,
            beta,
        };
        Ok(LossOutput {
            loss: total,
            breakdown,
            attention: dec.attention,
            posterior_attention,
            posterior,
            latent,
        })
    }

    /// Fully parallel inference: predicted length plus bias, prior sample, decode.
    pub fn synthesize(&self, ctx: &Ctx, char_ids: &[usize], r: usize, length_bias_frames: usize, noise: NoiseMode) -> Result<Synthesis> {
        if char_ids.is_empty() {
            return Err(Error::Input("empty text".into()));
        }
        let x = self.encode_text(ctx, char_ids)?;
        let predicted = ctx.tape.value(self.predict_length(ctx, &x)?.total).item();
        if !predicted.is_finite() {
            return Err(Error::Numeric(format!("predicted length is {predicted}")));
        }
        let target = predicted.round() as usize + length_bias_frames;
        let reduced = target.max(1).div_ceil(r);
        let base = match noise {
            NoiseMode::Zeros => Tensor::zeros(&[reduced, self.cfg.d_z]),
            NoiseMode::Sample { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::randn(&[reduced, self.cfg.d_z], 1.0, &mut rng)
            }
        };
        let latent = self.prior.sample(ctx, ctx.constant(base), x.x)?;
        let dec = self.decode_spectrogram(ctx, latent.z, &x, r, None)?;
        let spectrogram = ctx.tape.value(dec.post).clone();
        Ok(Synthesis {
            frames: spectrogram.shape()[0],
            spectrogram,
            attention: dec.attention,
            predicted_frames: predicted,
            reduced_frames: reduced,
        })
    }

    /// Standard-normal noise shaped for the reduced latent of an `n`-frame target.
    pub fn latent_noise<R: Rng + ?Sized>(&self, n: usize, r: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[n.div_ceil(r), self.cfg.d_z], 1.0, rng)
    }

    pub fn reduction_factors(&self) -> impl Iterator<Item = usize> + '_ {
        self.decoder_heads.keys().copied()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.prenet.iter().map(|(_, bn)| bn)
    }
}
