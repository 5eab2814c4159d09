//! ODE sampling and everything built on it: Euler integration with
//! classifier-free guidance and zero-init, timestep-shifted grids,
//! trajectory inversion, masked editing, and latent interpolation.

use thiserror::Error as ThisError;

use crate::codec::{denormalize, normalize, SvgCodec};
use crate::error::Error;
use crate::flow::VelocityNet;
use crate::nn::randn;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{slice_dot, slice_norm, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Euler steps; equals NFE unless `zero_init` skips the first evaluation.
    pub steps: usize,
    pub guidance_w: f64,
    /// Replace the first velocity evaluation with zero (state unchanged
    /// across the first interval).
    pub zero_init: bool,
    /// Timestep shift; 1 is the uniform grid.
    pub shift_s: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, guidance_w: 1.55, zero_init: true, shift_s: 1.0, seed: 0 }
    }
}

/// Recorded integration path; node times are strictly monotone in the
/// integration direction.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub nodes: Vec<(f64, Tensor)>,
    pub class: Option<usize>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &Tensor {
        &self.nodes.last().expect("non-empty trajectory").1
    }

    /// State at time `t`, linearly interpolated between bracketing nodes and
    /// clamped to the recorded range.
    pub fn state_at(&self, t: f64) -> Tensor {
        debug_assert!(!self.nodes.is_empty());
        let ascending = self.nodes.first().unwrap().0 <= self.nodes.last().unwrap().0;
        let cmp = |a: f64, b: f64| if ascending { a <= b } else { a >= b };
        if cmp(t, self.nodes[0].0) {
            return self.nodes[0].1.clone();
        }
        if cmp(self.nodes.last().unwrap().0, t) {
            return self.nodes.last().unwrap().1.clone();
        }
        for w in self.nodes.windows(2) {
            let (t0, ref x0) = w[0];
            let (t1, ref x1) = w[1];
            if cmp(t0, t) && cmp(t, t1) {
                let span = t1 - t0;
                let frac = if span.abs() < 1e-15 { 0.0 } else { (t - t0) / span };
                let mut out = x0.clone();
                for (o, (a, b)) in out.data_mut().iter_mut().zip(x0.data().iter().zip(x1.data())) {
                    *o = a + frac * (b - a);
                }
                return out;
            }
        }
        self.nodes.last().unwrap().1.clone()
    }
}

#[derive(Debug, ThisError)]
pub enum SamplerError {
    /// The state went non-finite mid-integration; the recorded prefix is
    /// attached.
    #[error("numeric: non-finite state at t={t}")]
    NonFinite { t: f64, partial: Trajectory },
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<SamplerError> for Error {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::NonFinite { t, .. } => {
                Error::Numeric(format!("non-finite state at t={t}"))
            }
            SamplerError::Core(c) => c,
        }
    }
}

pub type SampleResult<T> = std::result::Result<T, SamplerError>;

/// Sampling grid from 1 to 0: the uniform grid `u_k = 1 - k/steps` mapped
/// through `tau(u) = s*u / (1 + (s-1)*u)`. Endpoints are pinned exactly.
pub fn time_grid(steps: usize, shift_s: f64) -> crate::error::Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if shift_s <= 0.0 {
        return Err(Error::Config(format!("shift must be positive, got {shift_s}")));
    }
    let mut grid = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let u = 1.0 - k as f64 / steps as f64;
        grid.push(shift_s * u / (1.0 + (shift_s - 1.0) * u));
    }
    grid[0] = 1.0;
    grid[steps] = 0.0;
    Ok(grid)
}

/// Ascending inversion grid: uniform nodes `j/steps` strictly below
/// `t_edit`, then `t_edit` itself.
pub fn inversion_grid(steps: usize, t_edit: f64) -> crate::error::Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if !(t_edit > 0.0 && t_edit <= 1.0) {
        return Err(Error::Config(format!("t_edit must be in (0,1], got {t_edit}")));
    }
    let mut grid: Vec<f64> = (0..=steps)
        .map(|j| j as f64 / steps as f64)
        .take_while(|&u| u < t_edit)
        .collect();
    grid.push(t_edit);
    Ok(grid)
}

/// Outcome of one Euler integration.
#[derive(Debug)]
pub struct Integration {
    pub endpoint: Tensor,
    pub trajectory: Trajectory,
    /// Field evaluations actually performed.
    pub nfe: usize,
}

/// First-order Euler over an arbitrary monotone grid:
/// `x_{k+1} = x_k + (t_{k+1} - t_k) * v(x_k, t_k)`.
///
/// With `zero_init` the first velocity is replaced by zero and not counted
/// as an evaluation.
pub fn integrate<F>(
    mut field: F,
    grid: &[f64],
    start: &Tensor,
    zero_init: bool,
) -> SampleResult<Integration>
where
    F: FnMut(&Tensor, f64) -> crate::error::Result<Tensor>,
{
    if grid.len() < 2 {
        return Err(Error::Config("grid needs at least 2 nodes".into()).into());
    }
    let mut x = start.clone();
    let mut nodes = vec![(grid[0], x.clone())];
    let mut nfe = 0usize;
    for k in 0..grid.len() - 1 {
        let (t0, t1) = (grid[k], grid[k + 1]);
        if !(zero_init && k == 0) {
            let v = field(&x, t0)?;
            nfe += 1;
            let dt = t1 - t0;
            for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
                *xi += dt * vi;
            }
        }
        if !x.is_finite() {
            return Err(SamplerError::NonFinite {
                t: t1,
                partial: Trajectory { nodes, class: None },
            });
        }
        nodes.push((t1, x.clone()));
    }
    Ok(Integration { endpoint: x, trajectory: Trajectory { nodes, class: None }, nfe })
}

/// Guided velocity `v_null + w * (v_class - v_null)`. `w = 1` returns the
/// conditional prediction exactly, `w = 0` the null prediction exactly.
pub fn cfg_velocity(
    net: &VelocityNet,
    x: &Tensor,
    t: f64,
    class: usize,
    w: f64,
) -> crate::error::Result<Tensor> {
    if w == 1.0 {
        return net.velocity(x, t, Some(class));
    }
    if w == 0.0 {
        return net.velocity(x, t, None);
    }
    let v_null = net.velocity(x, t, None)?;
    let v_class = net.velocity(x, t, Some(class))?;
    let data = v_null
        .data()
        .iter()
        .zip(v_class.data())
        .map(|(n, c)| n + w * (c - n))
        .collect();
    Tensor::new(v_null.shape().to_vec(), data)
}

/// Integrate the guided ODE from noise (t=1) to a sample (t=0).
pub fn euler_sample(
    net: &VelocityNet,
    config: &SamplerConfig,
    noise: &Tensor,
    class: Option<usize>,
) -> SampleResult<Integration> {
    if noise.len() != net.feature_dim() {
        return Err(Error::Shape(format!(
            "noise width {} vs net width {}",
            noise.len(),
            net.feature_dim()
        ))
        .into());
    }
    let grid = time_grid(config.steps, config.shift_s)?;
    let field = |x: &Tensor, t: f64| match class {
        Some(c) => cfg_velocity(net, x, t, c, config.guidance_w),
        None => net.velocity(x, t, None),
    };
    let mut out = integrate(field, &grid, noise, config.zero_init)?;
    out.trajectory.class = class;
    Ok(out)
}

/// Integrate the conditional ODE forward from a data point to `t_edit`,
/// recording every node.
pub fn invert(
    net: &VelocityNet,
    x0_feature: &Tensor,
    class: Option<usize>,
    t_edit: f64,
    steps: usize,
) -> SampleResult<Trajectory> {
    let grid = inversion_grid(steps, t_edit)?;
    let field = |x: &Tensor, t: f64| net.velocity(x, t, class);
    let mut out = integrate(field, &grid, x0_feature, false)?;
    out.trajectory.class = class;
    Ok(out.trajectory)
}

// ---------------------------------------------------------------------------
// Masks and editing
// ---------------------------------------------------------------------------

/// Spatial edit mask: raw {0,1}, Gaussian-softened copy, and a fade schedule
/// that holds at 1 for the first 70% of steps then releases linearly to 0.
#[derive(Debug, Clone)]
pub struct EditMask {
    pub raw: Tensor,
    pub softened: Tensor,
    pub hold_frac: f64,
}

pub const FADE_HOLD_FRAC: f64 = 0.7;

impl EditMask {
    /// Re-imposition multiplier for integration step `k` of `n_steps`.
    pub fn fade(&self, step: usize, n_steps: usize) -> f64 {
        if n_steps <= 1 {
            return 1.0;
        }
        let p = step as f64 / (n_steps - 1) as f64;
        if p <= self.hold_frac {
            1.0
        } else {
            ((1.0 - p) / (1.0 - self.hold_frac)).max(0.0)
        }
    }

    pub fn is_all_ones(&self) -> bool {
        self.raw.data().iter().all(|&v| v == 1.0)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.raw.data().iter().all(|&v| v == 0.0)
    }
}

/// Soften a binary `H x W` mask with a separable Gaussian blur whose kernel
/// is renormalized at the borders (a constant mask stays constant).
pub fn soften_mask(raw: &Tensor, blur_sigma: f64) -> crate::error::Result<EditMask> {
    if raw.shape().len() != 2 {
        return Err(Error::Shape(format!("mask must be H x W, got {:?}", raw.shape())));
    }
    if blur_sigma < 0.0 {
        return Err(Error::Config("blur_sigma must be >= 0".into()));
    }
    if raw.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config("raw mask values must be 0 or 1".into()));
    }
    let softened = if blur_sigma == 0.0 {
        raw.clone()
    } else {
        let radius = (3.0 * blur_sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i as f64 * i as f64) / (2.0 * blur_sigma * blur_sigma)).exp())
            .collect();
        let (h, w) = (raw.shape()[0], raw.shape()[1]);
        let blur_axis = |src: &Tensor, horizontal: bool| -> Tensor {
            let mut dst = Tensor::zeros(&[h, w]);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as i64 - radius;
                        let (sy, sx) = if horizontal { (y, x + off) } else { (y + off, x) };
                        if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            acc += kv * src.data()[(sy * w as i64 + sx) as usize];
                            norm += kv;
                        }
                    }
                    dst.data_mut()[(y * w as i64 + x) as usize] = acc / norm;
                }
            }
            dst
        };
        blur_axis(&blur_axis(raw, true), false)
    };
    Ok(EditMask { raw: raw.clone(), softened, hold_frac: FADE_HOLD_FRAC })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EditConfig {
    /// Inversion depth in (0, 1].
    pub t_edit: f64,
    pub steps: usize,
    pub guidance_w: f64,
    pub shift_s: f64,
    pub blur_sigma: f64,
    /// Class used for the inversion pass; None inverts under the null class.
    pub source_class: Option<usize>,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            t_edit: 0.8,
            steps: 100,
            guidance_w: 4.0,
            shift_s: 0.4,
            blur_sigma: 1.0,
            source_class: None,
            seed: 0,
        }
    }
}

/// Inversion-guided masked edit.
///
/// The image is encoded and inverted to `t_edit` under its source class;
/// fresh noise is blended into the masked region; integration then runs back
/// to t=0 under the new class with guidance, re-imposing preserved pixels
/// from the decoded inversion trajectory through the softened, faded mask.
///
/// Features carry no spatial layout here, so every blend happens in pixel
/// space as a correction term `encode(blended) - encode(current)` on the
/// normalized feature state; the correction vanishes identically when the
/// mask covers everything, making a full-mask edit exactly a conditional
/// sample.
pub fn masked_edit(
    net: &VelocityNet,
    codec: &SvgCodec,
    image: &Tensor,
    mask: &EditMask,
    new_class: usize,
    config: &EditConfig,
) -> SampleResult<Tensor> {
    let (h, w, c) = codec.image_shape;
    if mask.raw.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} vs image {h} x {w}",
            mask.raw.shape()
        ))
        .into());
    }
    let pixel_dim = h * w * c;
    if image.len() != pixel_dim {
        return Err(Error::Shape(format!(
            "image has {} values, codec wants {pixel_dim}",
            image.len()
        ))
        .into());
    }
    let flat_image = Tensor::new(vec![1, pixel_dim], image.data().to_vec())?;

    // Pixel-space blend helper over the softened mask (mask=1 -> edited).
    let blend = |edited: &Tensor, preserved: &Tensor| -> Tensor {
        let mut out = edited.clone();
        for y in 0..h {
            for x in 0..w {
                let m = mask.softened.data()[y * w + x];
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    out.data_mut()[i] = m * edited.data()[i] + (1.0 - m) * preserved.data()[i];
                }
            }
        }
        out
    };
    let encode_n = |pixels: &Tensor| -> crate::error::Result<Tensor> {
        let rows = Tensor::new(vec![1, pixel_dim], pixels.data().to_vec())?;
        let feats = codec.encode(&rows)?;
        let normed = normalize(&feats, &codec.stats)?;
        Ok(Tensor::from_vec(normed.data().to_vec()))
    };
    let decode_1 = |z: &Tensor| -> crate::error::Result<Tensor> {
        let rows = Tensor::new(vec![1, net.feature_dim()], z.data().to_vec())?;
        let feats = denormalize(&rows, &codec.stats)?;
        let img = codec.decode(&feats)?;
        Ok(Tensor::from_vec(img.data().to_vec()))
    };

    // Encode and invert under the source class.
    let feats0 = codec.encode(&flat_image)?;
    let z0 = Tensor::from_vec(normalize(&feats0, &codec.stats)?.data().to_vec());
    let inversion = invert(net, &z0, config.source_class, config.t_edit, config.steps)?;

    // Fresh noise and the initial state at t_edit: start from the noise and
    // correct toward preserved content, so a full mask keeps the noise
    // untouched.
    let mut rng = rng_from(derive_seed(config.seed, 0xed17));
    let noise = randn(&[net.feature_dim()], &mut rng);
    let p_noise = decode_1(&noise)?;
    let p_pres = decode_1(&inversion.state_at(config.t_edit))?;
    let p_target = blend(&p_noise, &p_pres);
    let mut z = noise.clone();
    let corr_to = encode_n(&p_target)?;
    let corr_from = encode_n(&p_noise)?;
    for (zi, (a, b)) in z.data_mut().iter_mut().zip(corr_to.data().iter().zip(corr_from.data())) {
        *zi += a - b;
    }

    // Shifted grid over [t_edit, 0].
    let grid: Vec<f64> = time_grid(config.steps, config.shift_s)?
        .into_iter()
        .map(|t| t * config.t_edit)
        .collect();
    let n_steps = grid.len() - 1;
    for k in 0..n_steps {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let v = cfg_velocity(net, &z, t0, new_class, config.guidance_w)?;
        let dt = t1 - t0;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += dt * vi;
        }
        if !z.is_finite() {
            return Err(SamplerError::NonFinite {
                t: t1,
                partial: Trajectory { nodes: vec![(t1, z.clone())], class: Some(new_class) },
            });
        }
        let fade = mask.fade(k, n_steps);
        if fade > 0.0 {
            let p_cur = decode_1(&z)?;
            let p_ref = decode_1(&inversion.state_at(t1))?;
            let p_target = blend(&p_cur, &p_ref);
            let corr_to = encode_n(&p_target)?;
            let corr_from = encode_n(&p_cur)?;
            for (zi, (a, b)) in
                z.data_mut().iter_mut().zip(corr_to.data().iter().zip(corr_from.data()))
            {
                *zi += fade * (a - b);
            }
        }
    }

    let out = decode_1(&z)?;
    Ok(Tensor::new(vec![h, w, c], out.into_data())?)
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

/// `(1-lambda) x0 + lambda x1`.
pub fn interpolate_linear(x0: &Tensor, x1: &Tensor, lambda: f64) -> crate::error::Result<Tensor> {
    x0.require_same_shape(x1, "interpolation endpoints")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Spherical interpolation `sin((1-l)theta)/sin(theta) x0 + sin(l theta)/sin(theta) x1`
/// with `theta` the angle between the endpoints; near-parallel inputs fall
/// back to linear interpolation.
pub fn interpolate_slerp(x0: &Tensor, x1: &Tensor, lambda: f64) -> crate::error::Result<Tensor> {
    x0.require_same_shape(x1, "interpolation endpoints")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
    }
    let (n0, n1) = (slice_norm(x0.data()), slice_norm(x1.data()));
    if n0 < 1e-12 || n1 < 1e-12 {
        return Err(Error::Config("slerp requires nonzero endpoints".into()));
    }
    if lambda == 0.0 {
        return Ok(x0.clone());
    }
    if lambda == 1.0 {
        return Ok(x1.clone());
    }
    let cos = (slice_dot(x0.data(), x1.data()) / (n0 * n1)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-6 {
        return interpolate_linear(x0, x1, lambda);
    }
    let sin = theta.sin();
    let (a, b) = (((1.0 - lambda) * theta).sin() / sin, (lambda * theta).sin() / sin);
    let data = x0.data().iter().zip(x1.data()).map(|(u, v)| a * u + b * v).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Linear,
    Slerp,
}

/// Sample from interpolated noise at each grid value and decode; the whole
/// sweep shares one class.
pub fn interpolation_sweep(
    net: &VelocityNet,
    codec: &SvgCodec,
    x0: &Tensor,
    x1: &Tensor,
    class: usize,
    mode: InterpMode,
    lambdas: &[f64],
    config: &SamplerConfig,
) -> SampleResult<Vec<Tensor>> {
    let mut frames = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let noise = match mode {
            InterpMode::Linear => interpolate_linear(x0, x1, l)?,
            InterpMode::Slerp => interpolate_slerp(x0, x1, l)?,
        };
        let out = euler_sample(net, config, &noise, Some(class))?;
        let feats = Tensor::new(vec![1, net.feature_dim()], out.endpoint.into_data())?;
        let img = codec.decode(&denormalize(&feats, &codec.stats)?)?;
        frames.push(img);
    }
    Ok(frames)
}

/// `(max, mean)` of adjacent-frame L2 distances.
pub fn continuity_stat(frames: &[Tensor]) -> crate::error::Result<(f64, f64)> {
    if frames.len() < 2 {
        return Err(Error::Config("need at least 2 frames".into()));
    }
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for w in frames.windows(2) {
        let d = w[0].sq_dist(&w[1]).sqrt();
        max = max.max(d);
        sum += d;
    }
    Ok((max, sum / (frames.len() - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn uniform_grid_values() {
        let g = time_grid(4, 1.0).unwrap();
        assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn shifted_grid_hand_value() {
        // s=0.4 at u=0.5: 0.2 / 0.7.
        let g = time_grid(2, 0.4).unwrap();
        assert!((g[1] - 0.2 / 0.7).abs() < 1e-12, "tau = {}", g[1]);
    }

    #[test]
    fn grid_endpoints_exact_for_any_shift() {
        for s in [0.1, 0.4, 1.0, 2.5, 10.0] {
            for steps in [1, 3, 25, 100] {
                let g = time_grid(steps, s).unwrap();
                assert_eq!(g[0], 1.0);
                assert_eq!(*g.last().unwrap(), 0.0);
                // Strictly decreasing.
                for w in g.windows(2) {
                    assert!(w[0] > w[1], "s={s}, steps={steps}");
                }
            }
        }
    }

    #[test]
    fn constant_field_is_exact() {
        let c = Tensor::from_vec(vec![2.0, -1.0]);
        let noise = Tensor::from_vec(vec![0.5, 0.5]);
        for steps in [1, 3, 17] {
            let grid = time_grid(steps, 1.0).unwrap();
            let out = integrate(|_, _| Ok(c.clone()), &grid, &noise, false).unwrap();
            // Total dt is -1, so endpoint = noise - c.
            assert!((out.endpoint.data()[0] - (0.5 - 2.0)).abs() < 1e-12);
            assert!((out.endpoint.data()[1] - (0.5 + 1.0)).abs() < 1e-12);
            assert_eq!(out.nfe, steps);
        }
    }

    #[test]
    fn zero_init_single_step_is_identity() {
        let noise = Tensor::from_vec(vec![0.3, -0.7]);
        let grid = time_grid(1, 1.0).unwrap();
        let out = integrate(|_, _| Ok(Tensor::from_vec(vec![9.0, 9.0])), &grid, &noise, true).unwrap();
        assert_eq!(out.endpoint.data(), noise.data());
        assert_eq!(out.nfe, 0);
    }

    #[test]
    fn non_finite_state_returns_partial() {
        let noise = Tensor::from_vec(vec![1.0]);
        let grid = time_grid(4, 1.0).unwrap();
        let mut calls = 0;
        let res = integrate(
            |_, _| {
                calls += 1;
                Ok(Tensor::from_vec(vec![if calls >= 2 { f64::NAN } else { 1.0 }]))
            },
            &grid,
            &noise,
            false,
        );
        match res {
            Err(SamplerError::NonFinite { partial, .. }) => {
                assert_eq!(partial.nodes.len(), 2);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn inversion_grid_node_count() {
        // ceil(steps * t_edit) interior nodes plus the endpoint.
        let g = inversion_grid(10, 0.33).unwrap();
        assert_eq!(g.len(), 4 + 1);
        assert_eq!(*g.last().unwrap(), 0.33);
        let g = inversion_grid(10, 0.5).unwrap();
        assert_eq!(g.len(), 5 + 1);
        assert!(inversion_grid(10, 0.0).is_err());
    }

    #[test]
    fn cfg_velocity_reductions_and_affinity() {
        use crate::flow::{VelocityNet, VelocityNetConfig};
        let mut cfg = VelocityNetConfig::new(3, 2);
        cfg.zero_init_output = false;
        let net = VelocityNet::init(cfg, 21).unwrap();
        let mut rng = rng_from(3);
        let x = randn(&[3], &mut rng);
        let t = 0.4;

        let cond = net.velocity(&x, t, Some(1)).unwrap();
        let null = net.velocity(&x, t, None).unwrap();
        assert_eq!(cfg_velocity(&net, &x, t, 1, 1.0).unwrap().data(), cond.data());
        assert_eq!(cfg_velocity(&net, &x, t, 1, 0.0).unwrap().data(), null.data());

        let v0 = cfg_velocity(&net, &x, t, 1, 0.0).unwrap();
        let v1 = cfg_velocity(&net, &x, t, 1, 1.0).unwrap();
        let v2 = cfg_velocity(&net, &x, t, 1, 2.0).unwrap();
        for i in 0..3 {
            let lhs = v2.data()[i] - v1.data()[i];
            let rhs = v1.data()[i] - v0.data()[i];
            let scale = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!((lhs - rhs).abs() / scale < 1e-12, "component {i}");
        }
    }

    #[test]
    fn soften_mask_contracts() {
        let mut raw = Tensor::zeros(&[16, 16]);
        for y in 6..10 {
            for x in 6..10 {
                raw.data_mut()[y * 16 + x] = 1.0;
            }
        }
        // sigma = 0: untouched.
        let m0 = soften_mask(&raw, 0.0).unwrap();
        assert_eq!(m0.softened.data(), raw.data());

        let m = soften_mask(&raw, 1.0).unwrap();
        assert!(m.softened.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Interior mask: mass preserved within 1%.
        let mass_raw: f64 = raw.data().iter().sum();
        let mass_soft: f64 = m.softened.data().iter().sum();
        assert!((mass_soft - mass_raw).abs() <= 0.01 * mass_raw, "mass {mass_soft} vs {mass_raw}");

        // Constant masks stay constant under the renormalized kernel.
        let ones = Tensor::filled(&[8, 8], 1.0);
        let m1 = soften_mask(&ones, 2.0).unwrap();
        assert!(m1.softened.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fade_schedule_holds_then_releases() {
        let mask = EditMask {
            raw: Tensor::zeros(&[2, 2]),
            softened: Tensor::zeros(&[2, 2]),
            hold_frac: FADE_HOLD_FRAC,
        };
        let n = 10;
        let values: Vec<f64> = (0..n).map(|k| mask.fade(k, n)).collect();
        assert_eq!(values[0], 1.0);
        assert_eq!(values[n - 1], 0.0);
        for w in values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        // Holds for the first 70%.
        assert_eq!(values[(0.7 * (n - 1) as f64) as usize], 1.0);
    }

    #[test]
    fn linear_interpolation_cases() {
        let x0 = Tensor::from_vec(vec![2.0, 0.0]);
        let x1 = Tensor::from_vec(vec![0.0, 2.0]);
        assert_eq!(interpolate_linear(&x0, &x1, 0.0).unwrap().data(), x0.data());
        assert_eq!(interpolate_linear(&x0, &x1, 1.0).unwrap().data(), x1.data());
        assert_eq!(interpolate_linear(&x0, &x1, 0.5).unwrap().data(), &[1.0, 1.0]);
        // Convexity of the norm.
        let mid = interpolate_linear(&x0, &x1, 0.5).unwrap();
        assert!(mid.norm() <= x0.norm().max(x1.norm()));
    }

    #[test]
    fn slerp_orthonormal_midpoint() {
        let x0 = Tensor::from_vec(vec![1.0, 0.0]);
        let x1 = Tensor::from_vec(vec![0.0, 1.0]);
        let mid = interpolate_slerp(&x0, &x1, 0.5).unwrap();
        let half_sqrt2 = (2.0f64).sqrt() / 2.0;
        assert!((mid.data()[0] - half_sqrt2).abs() < 1e-12);
        assert!((mid.data()[1] - half_sqrt2).abs() < 1e-12);
        assert!((mid.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slerp_endpoints_exact_and_zero_rejected() {
        let mut rng = rng_from(7);
        let x0 = randn(&[6], &mut rng);
        let x1 = randn(&[6], &mut rng);
        assert_eq!(interpolate_slerp(&x0, &x1, 0.0).unwrap().data(), x0.data());
        assert_eq!(interpolate_slerp(&x0, &x1, 1.0).unwrap().data(), x1.data());
        let zero = Tensor::zeros(&[6]);
        assert!(interpolate_slerp(&zero, &x1, 0.5).is_err());
    }

    #[test]
    fn slerp_preserves_norm_for_equal_norm_endpoints() {
        let mut rng = rng_from(11);
        for _ in 0..20 {
            let mut x0 = randn(&[8], &mut rng);
            let mut x1 = randn(&[8], &mut rng);
            let norm = 2.5;
            x0.scale(norm / x0.norm());
            x1.scale(norm / x1.norm());
            for i in 0..=10 {
                let l = i as f64 / 10.0;
                let v = interpolate_slerp(&x0, &x1, l).unwrap();
                assert!(
                    (v.norm() - norm).abs() / norm < 1e-9,
                    "lambda={l}, norm={}",
                    v.norm()
                );
            }
        }
    }

    #[test]
    fn linear_midpoint_shrinks_gaussian_norm() {
        // Mean midpoint norm falls below the mean endpoint norm in dim >= 8.
        let mut rng = rng_from(13);
        let n = 1000;
        let mut mid_mean = 0.0;
        let mut end_mean = 0.0;
        for _ in 0..n {
            let x0 = randn(&[8], &mut rng);
            let x1 = randn(&[8], &mut rng);
            let mid = interpolate_linear(&x0, &x1, 0.5).unwrap();
            mid_mean += mid.norm();
            end_mean += 0.5 * (x0.norm() + x1.norm());
        }
        assert!(mid_mean < end_mean, "mid {mid_mean} vs end {end_mean}");
    }

    #[test]
    fn trajectory_state_interpolates() {
        let traj = Trajectory {
            nodes: vec![
                (0.0, Tensor::from_vec(vec![0.0])),
                (0.5, Tensor::from_vec(vec![1.0])),
                (1.0, Tensor::from_vec(vec![3.0])),
            ],
            class: None,
        };
        assert_eq!(traj.state_at(0.25).data(), &[0.5]);
        assert_eq!(traj.state_at(0.75).data(), &[2.0]);
        assert_eq!(traj.state_at(-1.0).data(), &[0.0]);
        assert_eq!(traj.state_at(2.0).data(), &[3.0]);
    }
}
