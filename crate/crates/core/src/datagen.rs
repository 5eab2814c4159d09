//! Deterministic synthetic data.
//!
//! Two generators: labeled 2-D (or d-D) Gaussian mixtures in matched-moment
//! `dispersed` / `entangled` presets, and a tiny procedural shape-image set
//! for the codec and diffusion experiments.
//!
//! The presets share pooled mean and covariance exactly: the dispersed one
//! puts one class at each of two well-separated modes, the entangled one
//! puts both classes at both modes. Any sampling-quality difference between
//! them is therefore attributable to class structure alone.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance.
    pub var: f64,
    pub class_id: usize,
}

/// Labeled Gaussian mixture.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixturePreset {
    Dispersed,
    Entangled,
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let d = components[0].mean.len();
        let mut wsum = 0.0;
        for c in &components {
            if c.weight <= 0.0 || c.var <= 0.0 {
                return Err(Error::Config("component weight and var must be positive".into()));
            }
            if c.mean.len() != d {
                return Err(Error::Config("all component means must share a dimension".into()));
            }
            wsum += c.weight;
        }
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights sum to {wsum}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.components.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Renormalized sub-mixture of one class.
    pub fn conditional(&self, class_id: usize) -> Result<MixtureSpec> {
        let picked: Vec<MixtureComponent> = self
            .components
            .iter()
            .filter(|c| c.class_id == class_id)
            .cloned()
            .collect();
        if picked.is_empty() {
            return Err(Error::Config(format!("no components with class {class_id}")));
        }
        let total: f64 = picked.iter().map(|c| c.weight).sum();
        let comps = picked
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        MixtureSpec::new(comps)
    }

    /// Weighted mean of one class's component means.
    pub fn class_centroid(&self, class_id: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut acc = vec![0.0; d];
        let mut w = 0.0;
        for c in self.components.iter().filter(|c| c.class_id == class_id) {
            for (a, m) in acc.iter_mut().zip(&c.mean) {
                *a += c.weight * m;
            }
            w += c.weight;
        }
        if w == 0.0 {
            return Err(Error::Config(format!("no components with class {class_id}")));
        }
        for a in &mut acc {
            *a /= w;
        }
        Ok(acc)
    }

    pub fn pooled_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut acc = vec![0.0; d];
        for c in &self.components {
            for (a, m) in acc.iter_mut().zip(&c.mean) {
                *a += c.weight * m;
            }
        }
        acc
    }

    /// Full pooled covariance: `sum_i w_i (var_i I + mu_i mu_i^T) - mu mu^T`.
    pub fn pooled_covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mu = self.pooled_mean();
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for r in 0..d {
                for s in 0..d {
                    cov[r * d + s] += c.weight * c.mean[r] * c.mean[s];
                    if r == s {
                        cov[r * d + s] += c.weight * c.var;
                    }
                }
            }
        }
        for r in 0..d {
            for s in 0..d {
                cov[r * d + s] -= mu[r] * mu[s];
            }
        }
        cov
    }

    /// Mean isotropic component variance (all presets use a shared var).
    pub fn mean_var(&self) -> f64 {
        let w: f64 = self.components.iter().map(|c| c.weight * c.var).sum();
        w
    }
}

/// Mode offset used by both presets along the first axis.
const PRESET_OFFSET: f64 = 3.0;

/// Build a two-class preset in dimension `d`.
///
/// `dispersed`: class 0 at `-3 e1`, class 1 at `+3 e1`, unit variance.
/// `entangled`: both classes at both modes (weight 1/4 each), so the class
/// centroids coincide while the pooled distribution is identical to the
/// dispersed preset.
pub fn make_mixture(preset: MixturePreset, d: usize, _seed: u64) -> Result<MixtureSpec> {
    if d == 0 {
        return Err(Error::Config("mixture dimension must be >= 1".into()));
    }
    let mut neg = vec![0.0; d];
    neg[0] = -PRESET_OFFSET;
    let mut pos = vec![0.0; d];
    pos[0] = PRESET_OFFSET;
    let comps = match preset {
        MixturePreset::Dispersed => vec![
            MixtureComponent { weight: 0.5, mean: neg, var: 1.0, class_id: 0 },
            MixtureComponent { weight: 0.5, mean: pos, var: 1.0, class_id: 1 },
        ],
        MixturePreset::Entangled => vec![
            MixtureComponent { weight: 0.25, mean: neg.clone(), var: 1.0, class_id: 0 },
            MixtureComponent { weight: 0.25, mean: pos.clone(), var: 1.0, class_id: 0 },
            MixtureComponent { weight: 0.25, mean: neg, var: 1.0, class_id: 1 },
            MixtureComponent { weight: 0.25, mean: pos, var: 1.0, class_id: 1 },
        ],
    };
    MixtureSpec::new(comps)
}

/// Points plus class labels.
#[derive(Debug, Clone)]
pub struct LabeledPoints {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

/// Draw `n` labeled points: component by weight, then an isotropic normal.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<LabeledPoints> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let d = spec.dim();
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (point, label) = sample_one(spec, &mut rng);
        data.extend_from_slice(&point);
        labels.push(label);
    }
    Ok(LabeledPoints { points: Tensor::new(vec![n, d], data)?, labels })
}

/// One labeled draw from the mixture.
pub fn sample_one(spec: &MixtureSpec, rng: &mut StdRng) -> (Vec<f64>, usize) {
    let comp = &spec.components[pick_component(spec, rng)];
    let sd = comp.var.sqrt();
    let point = comp
        .mean
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sd * z
        })
        .collect();
    (point, comp.class_id)
}

fn pick_component(spec: &MixtureSpec, rng: &mut StdRng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, c) in spec.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    spec.components.len() - 1
}

// ---------------------------------------------------------------------------
// Shape images
// ---------------------------------------------------------------------------

pub const SHAPE_KINDS: [&str; 4] = ["disc", "square", "triangle", "cross"];

/// Generator parameters; jitter ranges are fractions of the image size.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShapeGenConfig {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    pub center_jitter: (f64, f64),
    pub radius_range: (f64, f64),
    pub hue_jitter: f64,
    pub background_range: (f64, f64),
    /// Brightness stripes across the shape body: fixed period (pixels),
    /// random angle/phase, amplitude drawn from this range.
    pub stripe_period: f64,
    pub stripe_amp: (f64, f64),
}

impl ShapeGenConfig {
    pub fn new(n: usize, classes: usize, size: usize, seed: u64) -> Self {
        Self {
            n,
            classes,
            size,
            seed,
            center_jitter: (0.32, 0.68),
            radius_range: (0.16, 0.32),
            hue_jitter: 0.08,
            background_range: (0.02, 0.10),
            stripe_period: 2.0,
            stripe_amp: (0.25, 0.60),
        }
    }
}

/// Procedural labeled images, pixel values in [0,1], shape `n x H x W x 3`.
#[derive(Debug, Clone)]
pub struct ShapeImageDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub config: ShapeGenConfig,
}

impl ShapeImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let w = self.image_dim();
        &self.images.data()[i * w..(i + 1) * w]
    }

    /// Copy of the images as a `(n, H*W*C)` matrix for the MLP codecs.
    pub fn flattened(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.image_dim()], self.images.data().to_vec())
            .expect("shape agrees")
    }

    /// Deterministic index split: first `n_train` rows vs the rest.
    pub fn split_at(&self, n_train: usize) -> Result<(ShapeImageDataset, ShapeImageDataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::Config(format!(
                "split {n_train} out of range for {} samples",
                self.len()
            )));
        }
        let w = self.image_dim();
        let s = self.images.shape();
        let (h, wdt, c) = (s[1], s[2], s[3]);
        let head = Tensor::new(
            vec![n_train, h, wdt, c],
            self.images.data()[..n_train * w].to_vec(),
        )?;
        let tail = Tensor::new(
            vec![self.len() - n_train, h, wdt, c],
            self.images.data()[n_train * w..].to_vec(),
        )?;
        Ok((
            ShapeImageDataset { images: head, labels: self.labels[..n_train].to_vec(), config: self.config.clone() },
            ShapeImageDataset { images: tail, labels: self.labels[n_train..].to_vec(), config: self.config.clone() },
        ))
    }
}

/// Render the dataset: one shape per image on a dark background, class
/// balance within +-1, all randomness from the seed.
pub fn gen_shapes(config: &ShapeGenConfig) -> Result<ShapeImageDataset> {
    let ShapeGenConfig { n, classes: k, size, seed, .. } = *config;
    if k == 0 || k > SHAPE_KINDS.len() {
        return Err(Error::Config(format!(
            "classes must be in 1..={}, got {k}",
            SHAPE_KINDS.len()
        )));
    }
    if n == 0 || size < 8 {
        return Err(Error::Config("need n >= 1 and size >= 8".into()));
    }

    let mut rng = rng_from(seed);
    // Balanced class list, then a seeded shuffle.
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * size * size * 3);
    for &label in &labels {
        render_shape(config, label, &mut rng, &mut data);
    }
    Ok(ShapeImageDataset {
        images: Tensor::new(vec![n, size, size, 3], data)?,
        labels,
        config: config.clone(),
    })
}

fn render_shape(config: &ShapeGenConfig, class: usize, rng: &mut StdRng, out: &mut Vec<f64>) {
    let size = config.size as f64;
    let cx = rng.gen_range(config.center_jitter.0..config.center_jitter.1) * size;
    let cy = rng.gen_range(config.center_jitter.0..config.center_jitter.1) * size;
    let r = rng.gen_range(config.radius_range.0..config.radius_range.1) * size;
    let hue = class as f64 / config.classes as f64
        + rng.gen_range(-config.hue_jitter..config.hue_jitter);
    let sat = rng.gen_range(0.7..1.0);
    let val = rng.gen_range(0.75..1.0);
    let bg = rng.gen_range(config.background_range.0..config.background_range.1);
    let horizontal = rng.gen_range(0.0..1.0) < 0.5;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(config.stripe_amp.0..config.stripe_amp.1);
    let rgb = hsv_to_rgb(hue.rem_euclid(1.0), sat, val);
    let (dir_x, dir_y) = if horizontal { (1.0, 0.0) } else { (0.0, 1.0) };

    for py in 0..config.size {
        for px in 0..config.size {
            // 2x2 supersampled coverage.
            let mut hits = 0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = px as f64 + ox - cx;
                let dy = py as f64 + oy - cy;
                if inside_shape(class, dx, dy, r) {
                    hits += 1;
                }
            }
            let alpha = hits as f64 / 4.0;
            // Brightness stripes over the shape body only.
            let u = (px as f64 + 0.5) * dir_x + (py as f64 + 0.5) * dir_y;
            let wave = (std::f64::consts::TAU * u / config.stripe_period + phase).sin();
            let modulation = 1.0 - amp * (0.5 + 0.5 * wave);
            for ch in 0..3 {
                out.push(bg + alpha * (rgb[ch] * modulation - bg));
            }
        }
    }
}

fn inside_shape(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
        2 => {
            // Apex up at (0,-r), base at y = 0.75 r.
            dy >= -r && dy <= 0.75 * r && dx.abs() <= (dy + r) / 1.75
        }
        3 => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => unreachable!("class bounded by SHAPE_KINDS"),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
