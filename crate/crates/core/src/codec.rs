//! Latent-space codecs.
//!
//! The main codec pairs a frozen semantic encoder (an MLP pretrained to
//! classify the shape dataset, head discarded) with a small trainable
//! residual encoder; their outputs are concatenated along the channel axis
//! and decoded back to pixels. Stage-1 training optimizes only the residual
//! encoder and the decoder on pixel squared error, plus a moment-matching
//! penalty that keeps the residual channels at the scale of the semantic
//! ones. A plain (optionally variational) autoencoder with a comparable
//! latent width serves as the entangled baseline.

use rand::seq::SliceRandom;

use crate::datagen::ShapeImageDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, randn, softmax_cross_entropy, Activation, Mlp};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// FNV-1a over the little-endian f64 bytes of a parameter list; used to
/// verify that frozen parameters stay bit-identical across pipeline stages.
pub fn params_checksum(params: &[Tensor]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for v in p.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Channel statistics
// ---------------------------------------------------------------------------

/// Per-channel mean and standard deviation; std floored at 1e-6.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub population: usize,
}

pub const STD_FLOOR: f64 = 1e-6;

impl ChannelStats {
    /// Population statistics over the rows of a feature matrix.
    pub fn compute(features: &Tensor) -> Result<Self> {
        let n = features.rows();
        if n < 2 {
            return Err(Error::Contract("channel stats need at least 2 rows".into()));
        }
        let c = features.row_len();
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (s, (v, m)) in var.iter_mut().zip(features.row(i).iter().zip(&mean)) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std, population: n })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Mean of per-channel means and mean of per-channel stds.
    pub fn pooled(&self) -> (f64, f64) {
        let c = self.mean.len() as f64;
        (self.mean.iter().sum::<f64>() / c, self.std.iter().sum::<f64>() / c)
    }
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(features: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    if features.row_len() != stats.width() {
        return Err(Error::Shape(format!(
            "feature width {} vs stats width {}",
            features.row_len(),
            stats.width()
        )));
    }
    let mut out = features.clone();
    let c = stats.width();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for j in 0..c {
            row[j] = (row[j] - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(out)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(features: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    if features.row_len() != stats.width() {
        return Err(Error::Shape(format!(
            "feature width {} vs stats width {}",
            features.row_len(),
            stats.width()
        )));
    }
    let mut out = features.clone();
    let c = stats.width();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for j in 0..c {
            row[j] = row[j] * stats.std[j] + stats.mean[j];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Semantic encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SemanticConfig {
    pub feature_width: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Decay drives within-class feature collapse: the backbone keeps what
    /// the class task needs and sheds instance detail.
    pub weight_decay: f64,
    /// The semantic path sees an average-pooled view (pool x pool blocks);
    /// fine spatial detail is the residual encoder's job.
    pub pool: usize,
    /// Training diverged if the classification head stays below this.
    pub min_accuracy: f64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            feature_width: 32,
            hidden: 96,
            epochs: 80,
            batch: 128,
            lr: 2e-3,
            weight_decay: 0.02,
            pool: 4,
            min_accuracy: 0.8,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SemanticMeta {
    /// Training accuracy of the discarded classification head.
    pub head_accuracy: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Image -> semantic feature backbone over a spatially pooled view. Once
/// frozen it never trains again.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    backbone: Mlp,
    frozen: bool,
    /// Pixel geometry `(H, W, C)` of the expected input rows.
    image_shape: (usize, usize, usize),
    /// Average-pooling factor applied before the backbone.
    pool: usize,
    pub meta: SemanticMeta,
}

impl SemanticEncoder {
    /// Fresh, unfrozen backbone (no training yet).
    pub fn new_untrained(
        image_shape: (usize, usize, usize),
        config: &SemanticConfig,
        seed: u64,
    ) -> Result<Self> {
        let (h, w, c) = image_shape;
        if config.pool == 0 || h % config.pool != 0 || w % config.pool != 0 {
            return Err(Error::Config(format!(
                "pool {} does not divide image {h}x{w}",
                config.pool
            )));
        }
        let pooled_dim = (h / config.pool) * (w / config.pool) * c;
        let backbone = Mlp::init(
            &[pooled_dim, config.hidden, config.feature_width],
            Activation::Relu,
            derive_seed(seed, 0xbac),
        )?;
        Ok(Self {
            backbone,
            frozen: false,
            image_shape,
            pool: config.pool,
            meta: SemanticMeta { head_accuracy: 0.0, epochs: 0, seed },
        })
    }

    /// Train on the classification proxy task and freeze. The head used for
    /// training is discarded; its final train accuracy is recorded.
    pub fn pretrain(dataset: &ShapeImageDataset, config: &SemanticConfig, seed: u64) -> Result<Self> {
        let s = dataset.images.shape();
        let mut enc = Self::new_untrained((s[1], s[2], s[3]), config, seed)?;
        let acc = enc.train_classifier(dataset, config, seed)?;
        if acc < config.min_accuracy {
            return Err(Error::Numeric(format!(
                "semantic pretraining diverged: head accuracy {acc:.3} < {}",
                config.min_accuracy
            )));
        }
        enc.meta.head_accuracy = acc;
        enc.meta.epochs = config.epochs;
        enc.frozen = true;
        Ok(enc)
    }

    /// Joint backbone+head classification training; frozen encoders refuse.
    pub fn train_classifier(
        &mut self,
        dataset: &ShapeImageDataset,
        config: &SemanticConfig,
        seed: u64,
    ) -> Result<f64> {
        if self.frozen {
            return Err(Error::Contract("semantic encoder is frozen".into()));
        }
        let k = dataset.config.classes;
        let images = self.pooled_view(&dataset.flattened())?;
        let n = dataset.len();
        let mut head = Mlp::init(&[config.feature_width, k], Activation::Relu, derive_seed(seed, 0x4ead))?;

        let n_params = self.backbone.params().len() + head.params().len();
        let shapes: Vec<&[usize]> = self
            .backbone
            .params()
            .iter()
            .chain(head.params())
            .map(|p| p.shape())
            .collect();
        debug_assert_eq!(shapes.len(), n_params);
        let adamw = AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() };
        let mut opt = AdamWState::new(adamw, &shapes)?;

        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from(derive_seed(seed, 0x0bd));
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch) {
                let mut x = Tensor::zeros(&[chunk.len(), images.row_len()]);
                for (r, &i) in chunk.iter().enumerate() {
                    x.row_mut(r).copy_from_slice(images.row(i));
                }
                let (feats, bcache) = self.backbone.forward(&x)?;
                let (logits, hcache) = head.forward(&feats)?;
                let mut up = Tensor::zeros(&[chunk.len(), k]);
                for (r, &i) in chunk.iter().enumerate() {
                    let (_, dl) = softmax_cross_entropy(logits.row(r), dataset.labels[i]);
                    for (o, g) in up.row_mut(r).iter_mut().zip(&dl) {
                        *o = g / chunk.len() as f64;
                    }
                }
                let (hgrads, dfeats) = head.backward(&hcache, &up)?;
                let (bgrads, _) = self.backbone.backward(&bcache, &dfeats)?;

                let grad_refs: Vec<&Tensor> =
                    bgrads.tensors().iter().chain(hgrads.tensors()).collect();
                let mut param_refs: Vec<&mut Tensor> = Vec::with_capacity(n_params);
                param_refs.extend(self.backbone.params_mut().iter_mut());
                param_refs.extend(head.params_mut().iter_mut());
                opt.step(&mut param_refs, &grad_refs)?;
            }
        }

        // Final train accuracy of the head.
        let feats = self.backbone.eval(&images)?;
        let logits = head.eval(&feats)?;
        let correct = (0..n)
            .filter(|&i| argmax(logits.row(i)) == dataset.labels[i])
            .count();
        Ok(correct as f64 / n as f64)
    }

    /// Average-pool image rows into the backbone's coarse view.
    pub fn pooled_view(&self, images: &Tensor) -> Result<Tensor> {
        let (h, w, c) = self.image_shape;
        if images.row_len() != h * w * c {
            return Err(Error::Shape(format!(
                "image rows of {} values, expected {}",
                images.row_len(),
                h * w * c
            )));
        }
        let p = self.pool;
        let (ph, pw) = (h / p, w / p);
        let n = images.rows();
        let mut out = Tensor::zeros(&[n, ph * pw * c]);
        let inv = 1.0 / (p * p) as f64;
        for i in 0..n {
            let src = images.row(i);
            let dst = out.row_mut(i);
            for by in 0..ph {
                for bx in 0..pw {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for y in 0..p {
                            for x in 0..p {
                                acc += src[(((by * p + y) * w) + bx * p + x) * c + ch];
                            }
                        }
                        dst[(by * pw + bx) * c + ch] = acc * inv;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let pooled = self.pooled_view(images)?;
        self.backbone.eval(&pooled)
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn feature_width(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.in_dim()
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.backbone.params())
    }

    /// Reassemble from raw parts (checkpoint loading).
    pub fn from_parts(
        backbone: Mlp,
        frozen: bool,
        image_shape: (usize, usize, usize),
        pool: usize,
        meta: SemanticMeta,
    ) -> Self {
        Self { backbone, frozen, image_shape, pool, meta }
    }
}

// ---------------------------------------------------------------------------
// Alignment penalty
// ---------------------------------------------------------------------------

/// Moment-matching penalty between residual batch statistics and the pooled
/// semantic statistics: `sum_c (mu_c - mu_sem)^2 + (sd_c - sd_sem)^2`.
///
/// Residual moments are population statistics over the batch; the target is
/// the semantic stats pooled across channels.
pub fn alignment_penalty(residual_feats: &Tensor, semantic_stats: &ChannelStats) -> Result<f64> {
    alignment_penalty_grad(residual_feats, semantic_stats).map(|(p, _)| p)
}

/// Penalty plus its gradient with respect to the residual features.
pub fn alignment_penalty_grad(
    residual_feats: &Tensor,
    semantic_stats: &ChannelStats,
) -> Result<(f64, Tensor)> {
    let n = residual_feats.rows();
    if n < 2 {
        return Err(Error::Contract("alignment penalty needs batch >= 2".into()));
    }
    let c = residual_feats.row_len();
    let (target_mean, target_std) = semantic_stats.pooled();

    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(residual_feats.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for i in 0..n {
        for (s, (v, m)) in var.iter_mut().zip(residual_feats.row(i).iter().zip(&mean)) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();

    let mut penalty = 0.0;
    for ch in 0..c {
        let dm = mean[ch] - target_mean;
        let ds = std[ch] - target_std;
        penalty += dm * dm + ds * ds;
    }

    let mut grad = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let row = residual_feats.row(i);
        let g = grad.row_mut(i);
        for ch in 0..c {
            let dm = mean[ch] - target_mean;
            let ds = std[ch] - target_std;
            let sd = std[ch].max(1e-8);
            g[ch] = 2.0 * dm / n as f64 + 2.0 * ds * (row[ch] - mean[ch]) / (n as f64 * sd);
        }
    }
    Ok((penalty, grad))
}

// ---------------------------------------------------------------------------
// SVG codec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Stage1Config {
    pub residual_width: usize,
    pub residual_hidden: usize,
    pub decoder_hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub align_weight: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            residual_width: 8,
            residual_hidden: 96,
            decoder_hidden: 128,
            epochs: 200,
            batch: 64,
            lr: 1e-3,
            align_weight: 0.1,
        }
    }
}

/// Frozen semantic encoder + residual encoder + decoder + channel stats.
///
/// Semantic channels always occupy indices `[0, c_s)` of the concatenated
/// feature.
#[derive(Debug, Clone)]
pub struct SvgCodec {
    pub semantic: SemanticEncoder,
    pub residual: Mlp,
    pub decoder: Mlp,
    pub stats: ChannelStats,
    pub align_weight: f64,
    /// `(H, W, C)` of the pixel space.
    pub image_shape: (usize, usize, usize),
    /// Checksum of the semantic parameters at stage-1 start.
    pub semantic_checksum: u64,
}

impl SvgCodec {
    pub fn c_s(&self) -> usize {
        self.semantic.feature_width()
    }

    pub fn c_r(&self) -> usize {
        self.residual.out_dim()
    }

    pub fn feature_width(&self) -> usize {
        self.c_s() + self.c_r()
    }

    pub fn pixel_dim(&self) -> usize {
        let (h, w, c) = self.image_shape;
        h * w * c
    }

    /// Concatenated `[semantic | residual]` features, unnormalized.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        if !self.semantic.is_frozen() {
            return Err(Error::Contract(
                "pipeline order: semantic encoder must be frozen before encoding".into(),
            ));
        }
        let sem = self.semantic.encode(images)?;
        let res = self.residual.eval(images)?;
        sem.concat_rows(&res)
    }

    /// Decode unnormalized features to images clamped in [0,1], shaped
    /// `(n, H, W, C)`.
    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        if features.row_len() != self.feature_width() {
            return Err(Error::Shape(format!(
                "feature width {} vs codec width {}",
                features.row_len(),
                self.feature_width()
            )));
        }
        let mut out = self.decoder.eval(features)?;
        out.clamp_in_place(0.0, 1.0);
        let (h, w, c) = self.image_shape;
        out.reshaped(vec![features.rows(), h, w, c])
    }

    /// encode -> decode round trip.
    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let feats = self.encode(images)?;
        self.decode(&feats)
    }

    /// Confirm the frozen semantic parameters are bit-identical to stage-1
    /// start.
    pub fn verify_semantic_checksum(&self) -> Result<()> {
        if self.semantic.checksum() != self.semantic_checksum {
            return Err(Error::Contract(
                "frozen semantic parameters changed since stage-1 training".into(),
            ));
        }
        Ok(())
    }
}

/// Stage-1 result; `diverged_at` reports a NaN abort with the last-good
/// epoch snapshot restored into `codec`.
pub struct Stage1Result {
    pub codec: SvgCodec,
    pub loss_curve: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Train the residual encoder and decoder on pixel squared error plus the
/// alignment penalty; the semantic encoder stays frozen and bit-identical.
pub fn train_codec_stage1(
    semantic: SemanticEncoder,
    dataset: &ShapeImageDataset,
    config: &Stage1Config,
    seed: u64,
) -> Result<Stage1Result> {
    if !semantic.is_frozen() {
        return Err(Error::Contract("stage 1 requires a frozen semantic encoder".into()));
    }
    let semantic_checksum = semantic.checksum();
    let images = dataset.flattened();
    let n = dataset.len();
    let pixel_dim = dataset.image_dim();
    let c_s = semantic.feature_width();

    let mut residual = Mlp::init(
        &[pixel_dim, config.residual_hidden, config.residual_width],
        Activation::Relu,
        derive_seed(seed, 0x1e5),
    )?;
    let mut decoder = Mlp::init(
        &[c_s + config.residual_width, config.decoder_hidden, pixel_dim],
        Activation::Relu,
        derive_seed(seed, 0xdec),
    )?;

    // Frozen features and their per-channel stats (alignment target).
    let sem_feats = semantic.encode(&images)?;
    let sem_stats = ChannelStats::compute(&sem_feats)?;

    let shapes: Vec<&[usize]> = residual
        .params()
        .iter()
        .chain(decoder.params())
        .map(|p| p.shape())
        .collect();
    let mut opt = AdamWState::new(AdamWConfig::with_lr(config.lr), &shapes)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(seed, 0x51a));
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut snapshot = (residual.clone(), decoder.clone());
    let mut diverged_at = None;

    'training: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue; // alignment needs batch statistics
            }
            let b = chunk.len();
            let mut x = Tensor::zeros(&[b, pixel_dim]);
            let mut sem_batch = Tensor::zeros(&[b, c_s]);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(images.row(i));
                sem_batch.row_mut(r).copy_from_slice(sem_feats.row(i));
            }

            let (res_feats, res_cache) = residual.forward(&x)?;
            let feats = sem_batch.concat_rows(&res_feats)?;
            let (recon, dec_cache) = decoder.forward(&feats)?;

            // Mean pixel squared error.
            let mut mse = 0.0;
            let mut d_recon = Tensor::zeros(&[b, pixel_dim]);
            let denom = (b * pixel_dim) as f64;
            for r in 0..b {
                let rr = recon.row(r);
                let xr = x.row(r);
                let dr = d_recon.row_mut(r);
                for j in 0..pixel_dim {
                    let diff = rr[j] - xr[j];
                    mse += diff * diff;
                    dr[j] = 2.0 * diff / denom;
                }
            }
            mse /= denom;

            let (penalty, d_align) = alignment_penalty_grad(&res_feats, &sem_stats)?;
            let loss = mse + config.align_weight * penalty;
            if !loss.is_finite() {
                residual = snapshot.0.clone();
                decoder = snapshot.1.clone();
                diverged_at = Some(epoch);
                break 'training;
            }
            epoch_loss += loss;
            batches += 1;

            let (dec_grads, d_feats) = decoder.backward(&dec_cache, &d_recon)?;
            // Split the feature gradient; the semantic part is discarded.
            let c_r = config.residual_width;
            let mut d_res = Tensor::zeros(&[b, c_r]);
            for r in 0..b {
                let src = &d_feats.row(r)[c_s..];
                let dst = d_res.row_mut(r);
                for j in 0..c_r {
                    dst[j] = src[j] + config.align_weight * d_align.row(r)[j];
                }
            }
            let (res_grads, _) = residual.backward(&res_cache, &d_res)?;

            let step = {
                let grad_refs: Vec<&Tensor> =
                    res_grads.tensors().iter().chain(dec_grads.tensors()).collect();
                let mut param_refs: Vec<&mut Tensor> = Vec::new();
                param_refs.extend(residual.params_mut().iter_mut());
                param_refs.extend(decoder.params_mut().iter_mut());
                opt.step(&mut param_refs, &grad_refs)
            };
            match step {
                Ok(()) => {}
                Err(Error::Numeric(_)) => {
                    residual = snapshot.0.clone();
                    decoder = snapshot.1.clone();
                    diverged_at = Some(epoch);
                    break 'training;
                }
                Err(e) => return Err(e),
            }
        }
        loss_curve.push(epoch_loss / batches.max(1) as f64);
        snapshot = (residual.clone(), decoder.clone());
    }

    // Final stats over the training set.
    let res_feats = residual.eval(&images)?;
    let feats = sem_feats.concat_rows(&res_feats)?;
    let stats = ChannelStats::compute(&feats)?;

    let s = dataset.images.shape();
    let codec = SvgCodec {
        semantic,
        residual,
        decoder,
        stats,
        align_weight: config.align_weight,
        image_shape: (s[1], s[2], s[3]),
        semantic_checksum,
    };
    codec.verify_semantic_checksum()?;
    Ok(Stage1Result { codec, loss_curve, diverged_at })
}

/// Ablation twin of stage 1: a decoder trained on the frozen semantic
/// features alone, same loop, budget and seed stream.
pub fn train_semantic_only_decoder(
    semantic: &SemanticEncoder,
    dataset: &ShapeImageDataset,
    config: &Stage1Config,
    seed: u64,
) -> Result<Mlp> {
    if !semantic.is_frozen() {
        return Err(Error::Contract("requires a frozen semantic encoder".into()));
    }
    let images = dataset.flattened();
    let n = dataset.len();
    let pixel_dim = dataset.image_dim();
    let c_s = semantic.feature_width();
    let sem_feats = semantic.encode(&images)?;

    let mut decoder = Mlp::init(
        &[c_s, config.decoder_hidden, pixel_dim],
        Activation::Relu,
        derive_seed(seed, 0xdec),
    )?;
    let shapes: Vec<&[usize]> = decoder.params().iter().map(|p| p.shape()).collect();
    let mut opt = AdamWState::new(AdamWConfig::with_lr(config.lr), &shapes)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(seed, 0x51a));
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let b = chunk.len();
            let mut x = Tensor::zeros(&[b, pixel_dim]);
            let mut sem_batch = Tensor::zeros(&[b, c_s]);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(images.row(i));
                sem_batch.row_mut(r).copy_from_slice(sem_feats.row(i));
            }
            let (recon, cache) = decoder.forward(&sem_batch)?;
            let mut d_recon = Tensor::zeros(&[b, pixel_dim]);
            let denom = (b * pixel_dim) as f64;
            for r in 0..b {
                for j in 0..pixel_dim {
                    d_recon.row_mut(r)[j] = 2.0 * (recon.row(r)[j] - x.row(r)[j]) / denom;
                }
            }
            let (grads, _) = decoder.backward(&cache, &d_recon)?;
            let grad_refs: Vec<&Tensor> = grads.tensors().iter().collect();
            let mut param_refs: Vec<&mut Tensor> = decoder.params_mut().iter_mut().collect();
            opt.step(&mut param_refs, &grad_refs)?;
        }
    }
    Ok(decoder)
}

/// Decode semantic-only features with the ablation decoder, clamped.
pub fn decode_semantic_only(decoder: &Mlp, sem_feats: &Tensor) -> Result<Tensor> {
    let mut out = decoder.eval(sem_feats)?;
    out.clamp_in_place(0.0, 1.0);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Baseline autoencoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BaselineConfig {
    pub latent_width: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { latent_width: 40, hidden: 128, epochs: 60, batch: 64, lr: 1e-3, kl_weight: 0.0 }
    }
}

/// Reconstruction-trained encoder/decoder pair; with `kl_weight > 0` the
/// encoder head is `[mean | logvar]` and training samples by
/// reparameterization, otherwise the mean is used directly.
#[derive(Debug, Clone)]
pub struct BaselineCodec {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub stats: ChannelStats,
    pub kl_weight: f64,
    pub latent_width: usize,
    pub image_shape: (usize, usize, usize),
}

impl BaselineCodec {
    /// Mean-head latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let full = self.encoder.eval(images)?;
        let n = full.rows();
        let mut out = Tensor::zeros(&[n, self.latent_width]);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&full.row(i)[..self.latent_width]);
        }
        Ok(out)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.row_len() != self.latent_width {
            return Err(Error::Shape(format!(
                "latent width {} vs codec width {}",
                latents.row_len(),
                self.latent_width
            )));
        }
        let mut out = self.decoder.eval(latents)?;
        out.clamp_in_place(0.0, 1.0);
        let (h, w, c) = self.image_shape;
        out.reshaped(vec![latents.rows(), h, w, c])
    }

    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let z = self.encode(images)?;
        self.decode(&z)
    }
}

/// Train the baseline autoencoder.
pub fn train_baseline_vae(
    dataset: &ShapeImageDataset,
    config: &BaselineConfig,
    seed: u64,
) -> Result<BaselineCodec> {
    let images = dataset.flattened();
    let n = dataset.len();
    let pixel_dim = dataset.image_dim();
    let cb = config.latent_width;

    let mut encoder = Mlp::init(
        &[pixel_dim, config.hidden, 2 * cb],
        Activation::Relu,
        derive_seed(seed, 0xe4c),
    )?;
    let mut decoder = Mlp::init(
        &[cb, config.hidden, pixel_dim],
        Activation::Relu,
        derive_seed(seed, 0xdec0),
    )?;

    let shapes: Vec<&[usize]> = encoder
        .params()
        .iter()
        .chain(decoder.params())
        .map(|p| p.shape())
        .collect();
    let mut opt = AdamWState::new(AdamWConfig::with_lr(config.lr), &shapes)?;

    let variational = config.kl_weight > 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(seed, 0x0ae));
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let b = chunk.len();
            let mut x = Tensor::zeros(&[b, pixel_dim]);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(images.row(i));
            }
            let (heads, enc_cache) = encoder.forward(&x)?;

            // z = mu (+ sd*eps when variational)
            let mut z = Tensor::zeros(&[b, cb]);
            let mut eps = Tensor::zeros(&[b, cb]);
            if variational {
                eps = randn(&[b, cb], &mut rng);
            }
            for r in 0..b {
                let h = heads.row(r);
                let zr = z.row_mut(r);
                for j in 0..cb {
                    zr[j] = h[j];
                    if variational {
                        zr[j] += (h[cb + j] / 2.0).exp() * eps.row(r)[j];
                    }
                }
            }

            let (recon, dec_cache) = decoder.forward(&z)?;
            let mut d_recon = Tensor::zeros(&[b, pixel_dim]);
            let denom = (b * pixel_dim) as f64;
            for r in 0..b {
                for j in 0..pixel_dim {
                    d_recon.row_mut(r)[j] = 2.0 * (recon.row(r)[j] - x.row(r)[j]) / denom;
                }
            }
            let (dec_grads, dz) = decoder.backward(&dec_cache, &d_recon)?;

            // Gradient into the encoder heads.
            let mut d_heads = Tensor::zeros(&[b, 2 * cb]);
            for r in 0..b {
                let h = heads.row(r);
                let dzr = dz.row(r);
                let dh = d_heads.row_mut(r);
                for j in 0..cb {
                    dh[j] = dzr[j];
                    if variational {
                        // z depends on logvar through sd*eps.
                        let sd = (h[cb + j] / 2.0).exp();
                        dh[cb + j] = dzr[j] * 0.5 * sd * eps.row(r)[j];
                        // KL(mu, logvar || N(0,1)), averaged over the batch.
                        let kl_scale = config.kl_weight / b as f64;
                        dh[j] += kl_scale * h[j];
                        dh[cb + j] += kl_scale * 0.5 * (h[cb + j].exp() - 1.0);
                    }
                }
            }
            let (enc_grads, _) = encoder.backward(&enc_cache, &d_heads)?;

            let grad_refs: Vec<&Tensor> =
                enc_grads.tensors().iter().chain(dec_grads.tensors()).collect();
            let mut param_refs: Vec<&mut Tensor> = Vec::new();
            param_refs.extend(encoder.params_mut().iter_mut());
            param_refs.extend(decoder.params_mut().iter_mut());
            opt.step(&mut param_refs, &grad_refs)?;
        }
    }

    // Stats over mean-head latents.
    let full = encoder.eval(&images)?;
    let mut latents = Tensor::zeros(&[n, cb]);
    for i in 0..n {
        latents.row_mut(i).copy_from_slice(&full.row(i)[..cb]);
    }
    let stats = ChannelStats::compute(&latents)?;

    let s = dataset.images.shape();
    Ok(BaselineCodec {
        encoder,
        decoder,
        stats,
        kl_weight: config.kl_weight,
        latent_width: cb,
        image_shape: (s[1], s[2], s[3]),
    })
}

/// Mean PSNR of a reconstruction batch against its source images.
pub fn mean_psnr(recon_rows: &Tensor, image_rows: &Tensor) -> Result<f64> {
    recon_rows.require_same_shape(image_rows, "psnr batch")?;
    let n = recon_rows.rows();
    let w = recon_rows.row_len();
    let mut total = 0.0;
    for i in 0..n {
        let mut mse = 0.0;
        for (a, b) in recon_rows.row(i).iter().zip(image_rows.row(i)) {
            let d = a - b;
            mse += d * d;
        }
        mse /= w as f64;
        total += if mse == 0.0 { 100.0 } else { 10.0 * (1.0 / mse).log10() };
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_shapes, ShapeGenConfig};

    fn tiny_dataset() -> ShapeImageDataset {
        gen_shapes(&ShapeGenConfig::new(96, 4, 16, 42)).unwrap()
    }

    #[test]
    fn frozen_encoder_refuses_training() {
        let ds = tiny_dataset();
        let cfg = SemanticConfig { epochs: 2, ..SemanticConfig::default() };
        let mut enc = SemanticEncoder::pretrain(&ds, &cfg, 1).unwrap();
        let err = enc.train_classifier(&ds, &cfg, 2).unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn alignment_penalty_hand_value() {
        // 1-channel residual with batch stats mu=1, sd=1 against pooled
        // target (0, 1): penalty = 1.
        let feats = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let stats = ChannelStats { mean: vec![0.0], std: vec![1.0], population: 2 };
        let p = alignment_penalty(&feats, &stats).unwrap();
        assert!((p - 1.0).abs() < 1e-12, "penalty = {p}");
    }

    #[test]
    fn alignment_penalty_zero_when_matched() {
        let feats = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let stats = ChannelStats { mean: vec![0.0], std: vec![1.0], population: 2 };
        let p = alignment_penalty(&feats, &stats).unwrap();
        assert!(p.abs() < 1e-12);
    }

    #[test]
    fn alignment_penalty_shuffle_invariant() {
        let stats = ChannelStats { mean: vec![0.3, -0.2], std: vec![1.1, 0.9], population: 2 };
        let a = Tensor::new(vec![3, 2], vec![0.1, 0.5, -0.4, 1.2, 0.9, -0.3]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![0.9, -0.3, 0.1, 0.5, -0.4, 1.2]).unwrap();
        let pa = alignment_penalty(&a, &stats).unwrap();
        let pb = alignment_penalty(&b, &stats).unwrap();
        assert!((pa - pb).abs() < 1e-12);
    }

    #[test]
    fn alignment_penalty_rejects_degenerate_batch() {
        let feats = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let stats = ChannelStats { mean: vec![0.0, 0.0], std: vec![1.0, 1.0], population: 2 };
        assert!(alignment_penalty(&feats, &stats).is_err());
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let stats = ChannelStats { mean: vec![0.5, -0.1, 0.2], std: vec![1.3, 0.8, 1.0], population: 3 };
        let mut rng = crate::rng::rng_from(6);
        let feats = randn(&[5, 3], &mut rng);
        let (_, grad) = alignment_penalty_grad(&feats, &stats).unwrap();
        let f = |x: &Tensor| alignment_penalty(x, &stats).unwrap();
        let err = crate::gradcheck::grad_check(f, &grad, &feats, 1e-6).unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn normalize_roundtrip_and_standardization() {
        let mut rng = crate::rng::rng_from(9);
        let feats = randn(&[64, 6], &mut rng);
        let stats = ChannelStats::compute(&feats).unwrap();
        let normed = normalize(&feats, &stats).unwrap();
        let back = denormalize(&normed, &stats).unwrap();
        for (a, b) in back.data().iter().zip(feats.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Normalized training features: per-channel mean ~0, std ~1.
        let check = ChannelStats::compute(&normed).unwrap();
        for m in &check.mean {
            assert!(m.abs() < 1e-6);
        }
        for s in &check.std {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_width_mismatch() {
        let stats = ChannelStats { mean: vec![0.0; 3], std: vec![1.0; 3], population: 2 };
        let feats = Tensor::zeros(&[2, 4]);
        assert!(normalize(&feats, &stats).is_err());
    }

    #[test]
    fn stats_floor_avoids_zero_division() {
        let feats = Tensor::new(vec![3, 1], vec![2.0, 2.0, 2.0]).unwrap();
        let stats = ChannelStats::compute(&feats).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let normed = normalize(&feats, &stats).unwrap();
        assert!(normed.is_finite());
    }

    #[test]
    fn stage1_respects_freeze_and_layout() {
        let ds = tiny_dataset();
        let sem_cfg = SemanticConfig { epochs: 4, ..SemanticConfig::default() };
        let enc = SemanticEncoder::pretrain(&ds, &sem_cfg, 3).unwrap();
        let before = enc.checksum();
        let cfg = Stage1Config { epochs: 3, ..Stage1Config::default() };
        let out = train_codec_stage1(enc, &ds, &cfg, 5).unwrap();
        assert!(out.diverged_at.is_none());
        let codec = out.codec;
        assert_eq!(codec.semantic.checksum(), before);
        codec.verify_semantic_checksum().unwrap();

        // First c_s channels come from the semantic encoder alone.
        let images = ds.flattened();
        let feats = codec.encode(&images).unwrap();
        assert_eq!(feats.row_len(), codec.feature_width());
        let sem = codec.semantic.encode(&images).unwrap();
        for i in 0..4 {
            assert_eq!(&feats.row(i)[..codec.c_s()], sem.row(i));
        }
    }

    #[test]
    fn stage1_zeroed_residual_zeroes_channels() {
        let ds = tiny_dataset();
        let sem_cfg = SemanticConfig { epochs: 4, ..SemanticConfig::default() };
        let enc = SemanticEncoder::pretrain(&ds, &sem_cfg, 3).unwrap();
        let cfg = Stage1Config { epochs: 1, ..Stage1Config::default() };
        let mut codec = train_codec_stage1(enc, &ds, &cfg, 5).unwrap().codec;
        for p in codec.residual.params_mut() {
            p.data_mut().fill(0.0);
        }
        let feats = codec.encode(&ds.flattened()).unwrap();
        let c_s = codec.c_s();
        for i in 0..4 {
            assert!(feats.row(i)[c_s..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stage1_divergence_keeps_last_good() {
        let mut ds = tiny_dataset();
        let sem_cfg = SemanticConfig { epochs: 4, ..SemanticConfig::default() };
        let enc = SemanticEncoder::pretrain(&ds, &sem_cfg, 3).unwrap();
        // A poisoned pixel sends the reconstruction loss non-finite on the
        // batch that touches it.
        ds.images.data_mut()[0] = f64::NAN;
        let cfg = Stage1Config { epochs: 4, ..Stage1Config::default() };
        let out = train_codec_stage1(enc, &ds, &cfg, 5).unwrap();
        assert!(out.diverged_at.is_some());
        assert!(out.codec.residual.params().iter().all(|p| p.is_finite()));
        assert!(out.codec.decoder.params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn decode_output_clamped_and_deterministic() {
        let ds = tiny_dataset();
        let sem_cfg = SemanticConfig { epochs: 4, ..SemanticConfig::default() };
        let enc = SemanticEncoder::pretrain(&ds, &sem_cfg, 3).unwrap();
        let cfg = Stage1Config { epochs: 2, ..Stage1Config::default() };
        let codec = train_codec_stage1(enc, &ds, &cfg, 5).unwrap().codec;
        let mut rng = crate::rng::rng_from(4);
        let feats = randn(&[3, codec.feature_width()], &mut rng);
        let mut scaled = feats.clone();
        scaled.scale(50.0);
        let img = codec.decode(&scaled).unwrap();
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = codec.decode(&scaled).unwrap();
        assert_eq!(img.data(), again.data());
    }

    #[test]
    fn baseline_kl_zero_is_deterministic_autoencoder() {
        let ds = tiny_dataset();
        let cfg = BaselineConfig { epochs: 2, ..BaselineConfig::default() };
        let a = train_baseline_vae(&ds, &cfg, 7).unwrap();
        let b = train_baseline_vae(&ds, &cfg, 7).unwrap();
        for (pa, pb) in a.encoder.params().iter().zip(b.encoder.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }
}
