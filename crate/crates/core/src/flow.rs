//! Conditional velocity network and its training loop.
//!
//! The trunk is an MLP over `[features | time embedding | class embedding]`
//! with a learned class table whose last row is the null class used for
//! guidance dropout. An optional attention block (with QK normalization)
//! operates on the first hidden state, reshaped into tokens. The output
//! layer starts at zero so the untrained net is the zero field.

use rand::Rng;

use crate::error::{Error, Result};
use crate::interpolant::{fm_loss, FieldModel, Interpolant, Weighting};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrads};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{slice_dot, Tensor};

/// Sinusoidal embedding with a geometric frequency ladder spanning [1, 1000];
/// first half sines, second half cosines.
pub fn time_embed(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for j in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            1000.0f64.powf(j as f64 / (half - 1) as f64)
        };
        data[j] = (freq * t).sin();
        data[half + j] = (freq * t).cos();
    }
    Ok(Tensor::from_vec(data))
}

// ---------------------------------------------------------------------------
// Attention with QK normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttnConfig {
    pub tokens: usize,
    pub heads: usize,
    pub qk_norm: bool,
}

const QK_NORM_FLOOR: f64 = 1e-12;

/// Multi-head scaled dot-product attention over a token matrix. With
/// `qk_norm` set, queries and keys are L2-normalized per head and the logits
/// scaled by a learned per-head temperature.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub config: AttnConfig,
    token_dim: usize,
    head_dim: usize,
    /// W_q, W_k, W_v, W_o, each token_dim x token_dim; then per-head temp.
    params: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    tokens: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
    /// Per head: T x T attention weights.
    attn: Vec<Tensor>,
    /// Per head: T x T normalized dot products (qk_norm only).
    unit_dots: Vec<Tensor>,
    /// Per head L2 norms of q and k rows (qk_norm only), T x heads.
    q_norms: Vec<f64>,
    k_norms: Vec<f64>,
}

impl AttentionBlock {
    pub fn init(hidden: usize, config: AttnConfig, seed: u64) -> Result<Self> {
        if config.tokens == 0 || hidden % config.tokens != 0 {
            return Err(Error::Config(format!(
                "hidden {hidden} not divisible into {} tokens",
                config.tokens
            )));
        }
        let token_dim = hidden / config.tokens;
        if config.heads == 0 || token_dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {token_dim} not divisible into {} heads",
                config.heads
            )));
        }
        let head_dim = token_dim / config.heads;
        let mut params = Vec::with_capacity(5);
        for stream in 0..4u64 {
            let m = Mlp::init(&[token_dim, token_dim], Activation::Relu, derive_seed(seed, stream))?;
            params.push(m.params()[0].clone());
        }
        params.push(Tensor::filled(&[config.heads], 1.0));
        Ok(Self { config, token_dim, head_dim, params })
    }

    /// Rebuild from explicit parameters (checkpoint loading).
    pub fn from_params(hidden: usize, config: AttnConfig, params: Vec<Tensor>) -> Result<Self> {
        let mut block = Self::init(hidden, config, 0)?;
        if params.len() != block.params.len() {
            return Err(Error::Shape(format!(
                "attention expects {} tensors, got {}",
                block.params.len(),
                params.len()
            )));
        }
        for (have, want) in params.iter().zip(&block.params) {
            if have.shape() != want.shape() {
                return Err(Error::Shape(format!(
                    "attention tensor shape {:?} vs {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        block.params = params;
        Ok(block)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    fn project(&self, which: usize, tokens: &Tensor) -> Tensor {
        let t = tokens.rows();
        let d = self.token_dim;
        let w = self.params[which].data();
        let mut out = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let x = tokens.row(i);
            let o = out.row_mut(i);
            for r in 0..d {
                let xr = x[r];
                if xr != 0.0 {
                    for (oc, wc) in o.iter_mut().zip(&w[r * d..(r + 1) * d]) {
                        *oc += xr * wc;
                    }
                }
            }
        }
        out
    }

    /// Forward over a `(tokens x token_dim)` matrix.
    pub fn forward(&self, tokens: &Tensor) -> Result<(Tensor, AttnCache)> {
        let t = tokens.rows();
        if t == 0 || tokens.row_len() != self.token_dim {
            return Err(Error::Shape(format!(
                "attention expects (T x {}), got {:?}",
                self.token_dim,
                tokens.shape()
            )));
        }
        let heads = self.config.heads;
        let dh = self.head_dim;
        let temp = self.params[4].data();

        let q = self.project(0, tokens);
        let k = self.project(1, tokens);
        let v = self.project(2, tokens);

        let mut q_norms = vec![0.0; t * heads];
        let mut k_norms = vec![0.0; t * heads];
        if self.config.qk_norm {
            for i in 0..t {
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    q_norms[i * heads + h] =
                        slice_dot(&q.row(i)[hs.clone()], &q.row(i)[hs.clone()]).sqrt().max(QK_NORM_FLOOR);
                    k_norms[i * heads + h] =
                        slice_dot(&k.row(i)[hs.clone()], &k.row(i)[hs]).sqrt().max(QK_NORM_FLOOR);
                }
            }
        }

        let mut attn = Vec::with_capacity(heads);
        let mut unit_dots = Vec::with_capacity(heads);
        let mut ctx = Tensor::zeros(&[t, self.token_dim]);
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let mut logits = Tensor::zeros(&[t, t]);
            let mut dots = Tensor::zeros(&[t, t]);
            for i in 0..t {
                for j in 0..t {
                    let raw = slice_dot(&q.row(i)[hs.clone()], &k.row(j)[hs.clone()]);
                    let l = if self.config.qk_norm {
                        let dot = raw / (q_norms[i * heads + h] * k_norms[j * heads + h]);
                        dots.row_mut(i)[j] = dot;
                        temp[h] * dot
                    } else {
                        raw / (dh as f64).sqrt()
                    };
                    logits.row_mut(i)[j] = l;
                }
            }
            // Row softmax.
            let mut a = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let row = logits.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..t {
                    let e = (row[j] - max).exp();
                    a.row_mut(i)[j] = e;
                    sum += e;
                }
                for j in 0..t {
                    a.row_mut(i)[j] /= sum;
                }
            }
            for i in 0..t {
                for j in 0..t {
                    let w = a.row(i)[j];
                    let src = &v.row(j)[hs.clone()];
                    let dst = &mut ctx.row_mut(i)[hs.clone()];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
            attn.push(a);
            unit_dots.push(dots);
        }

        let mut out = Tensor::zeros(&[t, self.token_dim]);
        {
            let w = self.params[3].data();
            let d = self.token_dim;
            for i in 0..t {
                let x = ctx.row(i);
                let o = out.row_mut(i);
                for r in 0..d {
                    let xr = x[r];
                    if xr != 0.0 {
                        for (oc, wc) in o.iter_mut().zip(&w[r * d..(r + 1) * d]) {
                            *oc += xr * wc;
                        }
                    }
                }
            }
        }

        let cache = AttnCache { tokens: tokens.clone(), q, k, v, ctx, attn, unit_dots, q_norms, k_norms };
        Ok((out, cache))
    }

    /// Backward pass; accumulates parameter gradients into `grads` (layout of
    /// [`AttentionBlock::zero_grads`]) and returns d(tokens).
    pub fn backward(&self, cache: &AttnCache, dout: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let t = cache.tokens.rows();
        let d = self.token_dim;
        let heads = self.config.heads;
        let dh = self.head_dim;
        let temp = self.params[4].data();

        // Output projection.
        let mut dctx = Tensor::zeros(&[t, d]);
        {
            let w = self.params[3].data();
            let dw = grads[3].data_mut();
            for i in 0..t {
                let ctx_row = cache.ctx.row(i);
                let g = dout.row(i);
                for r in 0..d {
                    let cr = ctx_row[r];
                    for c in 0..d {
                        dw[r * d + c] += cr * g[c];
                    }
                    dctx.row_mut(i)[r] = slice_dot(&w[r * d..(r + 1) * d], g);
                }
            }
        }

        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        for h in 0..heads {
            let hs = |_: usize| h * dh..(h + 1) * dh;
            let a = &cache.attn[h];

            // d(attn weights) and dv.
            let mut da = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let dctx_i = &dctx.row(i)[hs(0)];
                for j in 0..t {
                    da.row_mut(i)[j] = slice_dot(dctx_i, &cache.v.row(j)[hs(0)]);
                    let w = a.row(i)[j];
                    let dst = &mut dv.row_mut(j)[hs(0)];
                    for (dd, s) in dst.iter_mut().zip(dctx_i) {
                        *dd += w * s;
                    }
                }
            }

            // Softmax backward.
            let mut dlogit = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let s: f64 = (0..t).map(|j| a.row(i)[j] * da.row(i)[j]).sum();
                for j in 0..t {
                    dlogit.row_mut(i)[j] = a.row(i)[j] * (da.row(i)[j] - s);
                }
            }

            if self.config.qk_norm {
                let dots = &cache.unit_dots[h];
                let mut dqhat = Tensor::zeros(&[t, dh]);
                let mut dkhat = Tensor::zeros(&[t, dh]);
                let mut dtemp = 0.0;
                for i in 0..t {
                    for j in 0..t {
                        let dl = dlogit.row(i)[j];
                        if dl == 0.0 {
                            continue;
                        }
                        dtemp += dl * dots.row(i)[j];
                        let kn = cache.k_norms[j * heads + h];
                        let qn = cache.q_norms[i * heads + h];
                        let khat: Vec<f64> =
                            cache.k.row(j)[hs(0)].iter().map(|x| x / kn).collect();
                        let qhat: Vec<f64> =
                            cache.q.row(i)[hs(0)].iter().map(|x| x / qn).collect();
                        for (dst, s) in dqhat.row_mut(i).iter_mut().zip(&khat) {
                            *dst += dl * temp[h] * s;
                        }
                        for (dst, s) in dkhat.row_mut(j).iter_mut().zip(&qhat) {
                            *dst += dl * temp[h] * s;
                        }
                    }
                }
                grads[4].data_mut()[h] += dtemp;
                // Through the normalization: d(u/||u||).
                for i in 0..t {
                    let qn = cache.q_norms[i * heads + h];
                    let qhat: Vec<f64> = cache.q.row(i)[hs(0)].iter().map(|x| x / qn).collect();
                    let inner = slice_dot(&qhat, dqhat.row(i));
                    for (dst, (dh_v, u)) in dq.row_mut(i)[hs(0)]
                        .iter_mut()
                        .zip(dqhat.row(i).iter().zip(&qhat))
                    {
                        *dst += (dh_v - u * inner) / qn;
                    }
                    let kn = cache.k_norms[i * heads + h];
                    let khat: Vec<f64> = cache.k.row(i)[hs(0)].iter().map(|x| x / kn).collect();
                    let inner = slice_dot(&khat, dkhat.row(i));
                    for (dst, (dh_v, u)) in dk.row_mut(i)[hs(0)]
                        .iter_mut()
                        .zip(dkhat.row(i).iter().zip(&khat))
                    {
                        *dst += (dh_v - u * inner) / kn;
                    }
                }
            } else {
                let scale = 1.0 / (dh as f64).sqrt();
                for i in 0..t {
                    for j in 0..t {
                        let dl = dlogit.row(i)[j] * scale;
                        if dl == 0.0 {
                            continue;
                        }
                        let krow: Vec<f64> = cache.k.row(j)[hs(0)].to_vec();
                        let qrow: Vec<f64> = cache.q.row(i)[hs(0)].to_vec();
                        for (dst, s) in dq.row_mut(i)[hs(0)].iter_mut().zip(&krow) {
                            *dst += dl * s;
                        }
                        for (dst, s) in dk.row_mut(j)[hs(0)].iter_mut().zip(&qrow) {
                            *dst += dl * s;
                        }
                    }
                }
            }
        }

        // Through the Q/K/V projections back to the tokens.
        let mut dtokens = Tensor::zeros(&[t, d]);
        for (which, dproj) in [(0usize, &dq), (1, &dk), (2, &dv)] {
            let w = self.params[which].data();
            let dw = grads[which].data_mut();
            for i in 0..t {
                let x = cache.tokens.row(i);
                let g = dproj.row(i);
                for r in 0..d {
                    let xr = x[r];
                    for c in 0..d {
                        dw[r * d + c] += xr * g[c];
                    }
                    dtokens.row_mut(i)[r] += slice_dot(&w[r * d..(r + 1) * d], g);
                }
            }
        }
        Ok(dtokens)
    }

    #[cfg(test)]
    pub(crate) fn logits_for_test(&self, tokens: &Tensor) -> Result<Vec<Tensor>> {
        let (_, cache) = self.forward(tokens)?;
        let heads = self.config.heads;
        let temp = self.params[4].data();
        Ok((0..heads)
            .map(|h| {
                let mut l = cache.unit_dots[h].clone();
                l.scale(temp[h]);
                l
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Velocity network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VelocityNetConfig {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub time_dim: usize,
    pub class_dim: usize,
    pub hidden: usize,
    pub attention: Option<AttnConfig>,
    pub zero_init_output: bool,
}

impl VelocityNetConfig {
    pub fn new(feature_dim: usize, n_classes: usize) -> Self {
        Self {
            feature_dim,
            n_classes,
            time_dim: 16,
            class_dim: 8,
            hidden: 64,
            attention: None,
            zero_init_output: true,
        }
    }
}

/// Conditional velocity model `v(x, t, class)`.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: VelocityNetConfig,
    /// Linear input embedding `[x | t_emb | c_emb] -> hidden`.
    embed: Mlp,
    attn: Option<AttentionBlock>,
    /// `hidden -> hidden -> feature_dim`, silu between.
    out: Mlp,
    /// `(n_classes + 1) x class_dim`; row `n_classes` is the null class.
    class_table: Tensor,
}

#[derive(Debug)]
pub struct VelocityCache {
    embed: MlpCache,
    /// Pre-activation of the first hidden state.
    hidden_z: Tensor,
    attn: Option<AttnCache>,
    out: MlpCache,
    class_row: usize,
}

#[derive(Debug, Clone)]
pub struct VelocityGrads {
    pub embed: MlpGrads,
    pub attn: Option<Vec<Tensor>>,
    pub out: MlpGrads,
    pub class_table: Tensor,
}

impl VelocityGrads {
    pub fn add_assign(&mut self, other: &VelocityGrads) {
        self.embed.add_assign(&other.embed);
        if let (Some(a), Some(b)) = (self.attn.as_mut(), other.attn.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
        self.out.add_assign(&other.out);
        self.class_table.add_assign(&other.class_table);
    }

    pub fn tensor_refs(&self) -> Vec<&Tensor> {
        let mut refs: Vec<&Tensor> = self.embed.tensors().iter().collect();
        if let Some(a) = &self.attn {
            refs.extend(a.iter());
        }
        refs.extend(self.out.tensors().iter());
        refs.push(&self.class_table);
        refs
    }
}

impl VelocityNet {
    pub fn init(config: VelocityNetConfig, seed: u64) -> Result<Self> {
        if config.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        if config.n_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let in_dim = config.feature_dim + config.time_dim + config.class_dim;
        let embed = Mlp::init(&[in_dim, config.hidden], Activation::Silu, derive_seed(seed, 0xe))?;
        let attn = match config.attention {
            Some(ac) => Some(AttentionBlock::init(config.hidden, ac, derive_seed(seed, 0xa))?),
            None => None,
        };
        let mut out = Mlp::init(
            &[config.hidden, config.hidden, config.feature_dim],
            Activation::Silu,
            derive_seed(seed, 0x0),
        )?;
        if config.zero_init_output {
            out.zero_output_layer();
        }
        // Class table init at modest scale, deterministic.
        let table_proto = Mlp::init(
            &[config.class_dim, config.n_classes + 1],
            Activation::Silu,
            derive_seed(seed, 0xc),
        )?;
        let mut class_table = Tensor::zeros(&[config.n_classes + 1, config.class_dim]);
        for r in 0..=config.n_classes {
            for c in 0..config.class_dim {
                class_table.row_mut(r)[c] = table_proto.params()[0].data()[c * (config.n_classes + 1) + r];
            }
        }
        Ok(Self { config, embed, attn, out, class_table })
    }

    /// Rebuild from explicit parts (checkpoint loading).
    pub fn from_parts(
        config: VelocityNetConfig,
        embed: Mlp,
        attn: Option<AttentionBlock>,
        out: Mlp,
        class_table: Tensor,
    ) -> Result<Self> {
        let in_dim = config.feature_dim + config.time_dim + config.class_dim;
        if embed.dims() != [in_dim, config.hidden] {
            return Err(Error::Shape(format!("embed dims {:?}", embed.dims())));
        }
        if out.dims() != [config.hidden, config.hidden, config.feature_dim] {
            return Err(Error::Shape(format!("trunk dims {:?}", out.dims())));
        }
        if class_table.shape() != [config.n_classes + 1, config.class_dim] {
            return Err(Error::Shape(format!("class table shape {:?}", class_table.shape())));
        }
        if config.attention.is_some() != attn.is_some() {
            return Err(Error::Config("attention config/params mismatch".into()));
        }
        Ok(Self { config, embed, attn, out, class_table })
    }

    pub fn embed_net(&self) -> &Mlp {
        &self.embed
    }

    pub fn out_net(&self) -> &Mlp {
        &self.out
    }

    pub fn attention(&self) -> Option<&AttentionBlock> {
        self.attn.as_ref()
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn null_class_row(&self) -> usize {
        self.config.n_classes
    }

    pub fn class_table(&self) -> &Tensor {
        &self.class_table
    }

    fn class_row(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.config.n_classes),
            Some(c) if c <= self.config.n_classes => Ok(c),
            Some(c) => Err(Error::Config(format!(
                "class {c} out of range 0..={}",
                self.config.n_classes
            ))),
        }
    }

    /// Ordered parameter list: embed, attention (if any), output trunk,
    /// class table.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut refs: Vec<&Tensor> = self.embed.params().iter().collect();
        if let Some(a) = &self.attn {
            refs.extend(a.params().iter());
        }
        refs.extend(self.out.params().iter());
        refs.push(&self.class_table);
        refs
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut refs: Vec<&mut Tensor> = self.embed.params_mut().iter_mut().collect();
        if let Some(a) = &mut self.attn {
            refs.extend(a.params_mut().iter_mut());
        }
        refs.extend(self.out.params_mut().iter_mut());
        refs.push(&mut self.class_table);
        refs
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Velocity prediction; `None` selects the null class.
    pub fn velocity(&self, x: &Tensor, t: f64, class: Option<usize>) -> Result<Tensor> {
        self.forward_cached(x, t, class).map(|(v, _)| v)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor,
        t: f64,
        class: Option<usize>,
    ) -> Result<(Tensor, VelocityCache)> {
        if x.len() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "feature width {} vs net width {}",
                x.len(),
                self.config.feature_dim
            )));
        }
        let row = self.class_row(class)?;
        let t_emb = time_embed(t, self.config.time_dim)?;
        let mut input = Vec::with_capacity(
            self.config.feature_dim + self.config.time_dim + self.config.class_dim,
        );
        input.extend_from_slice(x.data());
        input.extend_from_slice(t_emb.data());
        input.extend_from_slice(self.class_table.row(row));
        let input = Tensor::from_vec(input);

        let (hidden_z, embed_cache) = self.embed.forward(&input)?;
        let mut h = hidden_z.clone();
        for v in h.data_mut() {
            *v = Activation::Silu.apply(*v);
        }

        let (h2, attn_cache) = match &self.attn {
            Some(block) => {
                let tokens = h
                    .clone()
                    .reshaped(vec![block.config.tokens, self.config.hidden / block.config.tokens])?;
                let (o, cache) = block.forward(&tokens)?;
                (o.reshaped(vec![self.config.hidden])?, Some(cache))
            }
            None => (h, None),
        };

        let (v, out_cache) = self.out.forward(&h2)?;
        let cache = VelocityCache {
            embed: embed_cache,
            hidden_z: hidden_z.reshaped(vec![self.config.hidden])?,
            attn: attn_cache,
            out: out_cache,
            class_row: row,
        };
        Ok((v.reshaped(vec![self.config.feature_dim])?, cache))
    }

    /// Zeroed gradient buffer.
    pub fn zero_grads(&self) -> VelocityGrads {
        VelocityGrads {
            embed: self.embed.zero_grads(),
            attn: self.attn.as_ref().map(|a| a.zero_grads()),
            out: self.out.zero_grads(),
            class_table: Tensor::zeros(self.class_table.shape()),
        }
    }

    /// Accumulate gradients for upstream d(loss)/d(velocity); returns
    /// d(loss)/d(x).
    pub fn backward_into(
        &self,
        cache: &VelocityCache,
        upstream: &Tensor,
        grads: &mut VelocityGrads,
    ) -> Result<Tensor> {
        let (out_grads, dh2) = self.out.backward(&cache.out, upstream)?;
        grads.out.add_assign(&out_grads);

        let dh = match (&self.attn, &cache.attn) {
            (Some(block), Some(acache)) => {
                let tokens = block.config.tokens;
                let dtok = dh2
                    .reshaped(vec![tokens, self.config.hidden / tokens])?;
                let attn_grads = grads.attn.as_mut().expect("attention grads allocated");
                let dtokens = block.backward(acache, &dtok, attn_grads)?;
                dtokens.reshaped(vec![self.config.hidden])?
            }
            _ => dh2,
        };

        // Silu applied after the input embedding.
        let mut dz = dh;
        for (g, z) in dz.data_mut().iter_mut().zip(cache.hidden_z.data()) {
            *g *= Activation::Silu.grad(*z);
        }
        let (embed_grads, dinput) = self.embed.backward(&cache.embed, &dz)?;
        grads.embed.add_assign(&embed_grads);

        // Split the input gradient; the class slice accumulates into its row.
        let f = self.config.feature_dim;
        let td = self.config.time_dim;
        let dx = Tensor::from_vec(dinput.data()[..f].to_vec());
        let dclass = &dinput.data()[f + td..];
        for (dst, g) in grads.class_table.row_mut(cache.class_row).iter_mut().zip(dclass) {
            *dst += g;
        }
        Ok(dx)
    }
}

impl FieldModel for VelocityNet {
    type Cache = VelocityCache;
    type Grads = VelocityGrads;

    fn new_grads(&self) -> VelocityGrads {
        self.zero_grads()
    }

    fn forward(&self, x: &Tensor, t: f64, class: Option<usize>) -> Result<(Tensor, VelocityCache)> {
        self.forward_cached(x, t, class)
    }

    fn backward(
        &self,
        cache: &VelocityCache,
        upstream: &Tensor,
        grads: &mut VelocityGrads,
    ) -> Result<()> {
        self.backward_into(cache, upstream, grads).map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Stage-2 training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowTrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub label_drop_prob: f64,
    pub weighting: Weighting,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            iterations: 2000,
            label_drop_prob: 0.1,
            weighting: Weighting::default(),
            seed: 0,
        }
    }
}

pub struct FlowTrainResult {
    /// Loss per iteration.
    pub loss_curve: Vec<f64>,
    /// Set when a non-finite loss aborted training; the net holds the last
    /// good snapshot.
    pub diverged_at: Option<usize>,
}

/// AdamW on the flow-matching loss over precomputed (normalized) features.
/// Each sample's class is replaced by the null class with probability
/// `label_drop_prob`.
pub fn train_flow(
    net: &mut VelocityNet,
    features: &Tensor,
    labels: &[usize],
    interp: Interpolant,
    config: &FlowTrainConfig,
) -> Result<FlowTrainResult> {
    let n = features.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!("{n} feature rows vs {} labels", labels.len())));
    }
    if !(0.0..1.0).contains(&config.label_drop_prob) {
        return Err(Error::Config(format!(
            "label_drop_prob must be in [0,1), got {}",
            config.label_drop_prob
        )));
    }
    if features.row_len() != net.feature_dim() {
        return Err(Error::Shape(format!(
            "feature width {} vs net width {}",
            features.row_len(),
            net.feature_dim()
        )));
    }
    for &l in labels {
        if l >= net.n_classes() {
            return Err(Error::Config(format!("label {l} out of range")));
        }
    }

    let adamw = AdamWConfig {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        weight_decay: config.weight_decay,
        epsilon: 1e-8,
    };
    let mut opt = AdamWState::for_params(adamw, &net.params())?;
    let mut rng = rng_from(derive_seed(config.seed, 0xf10));
    let mut curve = Vec::with_capacity(config.iterations);
    let snapshot_every = 50usize;
    let mut snapshot = net.clone();
    let mut diverged_at = None;

    for iter in 0..config.iterations {
        let mut batch = Tensor::zeros(&[config.batch, net.feature_dim()]);
        let mut classes = Vec::with_capacity(config.batch);
        for r in 0..config.batch {
            let i = rng.gen_range(0..n);
            batch.row_mut(r).copy_from_slice(features.row(i));
            let dropped = config.label_drop_prob > 0.0 && rng.gen_range(0.0..1.0) < config.label_drop_prob;
            classes.push(if dropped { None } else { Some(labels[i]) });
        }

        let result = fm_loss(&*net, &batch, &classes, interp, config.weighting, &mut rng);
        let (loss, grads) = match result {
            Ok(ok) => ok,
            Err(Error::Numeric(_)) => {
                *net = snapshot;
                diverged_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        };
        curve.push(loss);

        let step = {
            let grad_refs = grads.tensor_refs();
            let mut param_refs = net.params_mut();
            opt.step(&mut param_refs, &grad_refs)
        };
        match step {
            Ok(()) => {}
            Err(Error::Numeric(_)) => {
                *net = snapshot;
                diverged_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        }

        if (iter + 1) % snapshot_every == 0 {
            snapshot = net.clone();
        }
    }
    Ok(FlowTrainResult { loss_curve: curve, diverged_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::nn::randn;
    use crate::rng::rng_from;

    #[test]
    fn time_embed_at_zero() {
        let e = time_embed(0.0, 8).unwrap();
        assert!(e.data()[..4].iter().all(|&v| v == 0.0));
        assert!(e.data()[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_embed_norm_is_half_dim() {
        for t in [0.0, 0.13, 0.5, 0.99, 1.0] {
            let e = time_embed(t, 16).unwrap();
            assert!((e.sq_norm() - 8.0).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn time_embed_injective_on_grid() {
        let dim = 4;
        let embeds: Vec<Tensor> =
            (0..=200).map(|i| time_embed(i as f64 / 200.0, dim).unwrap()).collect();
        for i in 0..embeds.len() {
            for j in (i + 1)..embeds.len() {
                let d = embeds[i].sq_dist(&embeds[j]);
                assert!(d > 1e-12, "t_i={i}, t_j={j} collide");
            }
        }
    }

    #[test]
    fn time_embed_rejects_odd_dim() {
        assert!(time_embed(0.5, 7).is_err());
    }

    #[test]
    fn zero_init_output_gives_zero_field() {
        let net = VelocityNet::init(VelocityNetConfig::new(4, 3), 1).unwrap();
        let mut rng = rng_from(2);
        for _ in 0..5 {
            let x = randn(&[4], &mut rng);
            let v = net.velocity(&x, 0.3, Some(1)).unwrap();
            assert!(v.data().iter().all(|&u| u == 0.0));
        }
    }

    #[test]
    fn velocity_is_deterministic() {
        let mut cfg = VelocityNetConfig::new(4, 2);
        cfg.zero_init_output = false;
        let net = VelocityNet::init(cfg, 5).unwrap();
        let x = Tensor::from_vec(vec![0.2, -0.4, 1.0, 0.5]);
        let a = net.velocity(&x, 0.7, Some(0)).unwrap();
        let b = net.velocity(&x, 0.7, Some(0)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn class_out_of_range_rejected() {
        let net = VelocityNet::init(VelocityNetConfig::new(2, 2), 0).unwrap();
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        assert!(net.velocity(&x, 0.5, Some(3)).is_err());
        // Explicit null row is allowed.
        assert!(net.velocity(&x, 0.5, Some(2)).is_ok());
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let block = AttentionBlock::init(6, AttnConfig { tokens: 1, heads: 2, qk_norm: false }, 3).unwrap();
        let x = Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.7, 0.1, -0.5, 0.4]).unwrap();
        let (out, _) = block.forward(&x).unwrap();
        // softmax over one element is 1, so out = (x . W_v) . W_o.
        let d = 6;
        let wv = block.params()[2].data();
        let wo = block.params()[3].data();
        let mut v = vec![0.0; d];
        for c in 0..d {
            for r in 0..d {
                v[c] += x.data()[r] * wv[r * d + c];
            }
        }
        let mut expect = vec![0.0; d];
        for c in 0..d {
            for r in 0..d {
                expect[c] += v[r] * wo[r * d + c];
            }
        }
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn qk_norm_bounds_logits_by_temperature() {
        let mut block =
            AttentionBlock::init(8, AttnConfig { tokens: 4, heads: 2, qk_norm: true }, 9).unwrap();
        block.params_mut()[4].data_mut().copy_from_slice(&[0.7, 2.5]);
        let mut rng = rng_from(4);
        let tokens = randn(&[4, 2], &mut rng);
        let logits = block.logits_for_test(&tokens).unwrap();
        for (h, l) in logits.iter().enumerate() {
            let temp = [0.7, 2.5][h];
            for v in l.data() {
                assert!(v.abs() <= temp + 1e-12, "head {h} logit {v} exceeds {temp}");
            }
        }
    }

    #[test]
    fn qk_norm_changes_the_map() {
        let on = AttentionBlock::init(8, AttnConfig { tokens: 2, heads: 2, qk_norm: true }, 5).unwrap();
        let off = AttentionBlock::init(8, AttnConfig { tokens: 2, heads: 2, qk_norm: false }, 5).unwrap();
        let mut rng = rng_from(6);
        let tokens = randn(&[2, 4], &mut rng);
        let (a, _) = on.forward(&tokens).unwrap();
        let (b, _) = off.forward(&tokens).unwrap();
        assert!(a.sq_dist(&b) > 1e-9);
    }

    #[test]
    fn head_indivisibility_rejected() {
        assert!(AttentionBlock::init(8, AttnConfig { tokens: 3, heads: 1, qk_norm: false }, 0).is_err());
        assert!(AttentionBlock::init(8, AttnConfig { tokens: 2, heads: 3, qk_norm: false }, 0).is_err());
    }

    fn flat_params(net: &VelocityNet) -> Tensor {
        let mut flat = Vec::new();
        for p in net.params() {
            flat.extend_from_slice(p.data());
        }
        Tensor::from_vec(flat)
    }

    fn load_flat(net: &mut VelocityNet, flat: &Tensor) {
        let mut offset = 0;
        for p in net.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
    }

    fn param_gradcheck(config: VelocityNetConfig, seed: u64) -> f64 {
        let mut net = VelocityNet::init(config, seed).unwrap();
        let mut rng = rng_from(seed ^ 0xff);
        // Perturb all parameters so nothing sits at exactly zero.
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v += 0.05 * rng.gen_range(-1.0..1.0f64);
            }
        }
        let x = randn(&[net.feature_dim()], &mut rng);
        let t = rng.gen_range(0.1..0.9);
        let class = Some(rng.gen_range(0..net.n_classes()));
        let proj = randn(&[net.feature_dim()], &mut rng);

        let (v, cache) = net.forward_cached(&x, t, class).unwrap();
        let mut grads = net.zero_grads();
        net.backward_into(&cache, &proj, &mut grads).unwrap();
        let mut flat_grad = Vec::new();
        for g in grads.tensor_refs() {
            flat_grad.extend_from_slice(g.data());
        }
        drop(v);

        let point = flat_params(&net);
        let template = net.clone();
        let value = move |p: &Tensor| -> f64 {
            let mut probe = template.clone();
            load_flat(&mut probe, p);
            let out = probe.velocity(&x, t, class).unwrap();
            crate::tensor::slice_dot(out.data(), proj.data())
        };
        grad_check(value, &Tensor::from_vec(flat_grad), &point, 1e-5).unwrap()
    }

    #[test]
    fn velocity_net_parameter_gradients() {
        let mut cfg = VelocityNetConfig::new(3, 2);
        cfg.hidden = 16;
        cfg.time_dim = 4;
        cfg.class_dim = 4;
        cfg.zero_init_output = false;
        let err = param_gradcheck(cfg, 11);
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn velocity_net_attention_gradients() {
        let mut cfg = VelocityNetConfig::new(3, 2);
        cfg.hidden = 16;
        cfg.time_dim = 4;
        cfg.class_dim = 4;
        cfg.zero_init_output = false;
        cfg.attention = Some(AttnConfig { tokens: 4, heads: 2, qk_norm: false });
        let err = param_gradcheck(cfg.clone(), 13);
        assert!(err < 1e-5, "plain attention err = {err}");

        cfg.attention = Some(AttnConfig { tokens: 4, heads: 2, qk_norm: true });
        let err = param_gradcheck(cfg, 17);
        assert!(err < 1e-5, "qk-norm err = {err}");
    }

    #[test]
    fn null_row_untouched_without_dropout() {
        let mut net = VelocityNet::init(VelocityNetConfig::new(2, 2), 3).unwrap();
        let null_before = net.class_table().row(2).to_vec();
        let mut rng = rng_from(8);
        let features = randn(&[64, 2], &mut rng);
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let cfg = FlowTrainConfig {
            batch: 16,
            lr: 1e-3,
            iterations: 30,
            label_drop_prob: 0.0,
            seed: 4,
            ..FlowTrainConfig::default()
        };
        let out = train_flow(&mut net, &features, &labels, Interpolant::Linear, &cfg).unwrap();
        assert!(out.diverged_at.is_none());
        assert_eq!(net.class_table().row(2), null_before.as_slice());
    }

    #[test]
    fn training_reduces_loss_on_toy_mixture() {
        let spec = crate::datagen::make_mixture(crate::datagen::MixturePreset::Dispersed, 2, 0).unwrap();
        let pts = crate::datagen::sample_mixture(&spec, 2000, 5).unwrap();
        let mut net = VelocityNet::init(VelocityNetConfig::new(2, 2), 7).unwrap();
        let cfg = FlowTrainConfig {
            batch: 64,
            lr: 1e-3,
            iterations: 400,
            label_drop_prob: 0.1,
            seed: 9,
            ..FlowTrainConfig::default()
        };
        let out = train_flow(&mut net, &pts.points, &pts.labels, Interpolant::Linear, &cfg).unwrap();
        assert!(out.diverged_at.is_none());
        let n = out.loss_curve.len();
        let head = out.loss_curve[..n / 10].iter().sum::<f64>() / (n / 10) as f64;
        let tail = out.loss_curve[n - n / 10..].iter().sum::<f64>() / (n / 10) as f64;
        assert!(tail < head, "head {head}, tail {tail}");
    }
}
