//! Quantitative statistics: dispersion score, velocity coherence, linear
//! probe, PSNR/SSIM, PCA projection, and the few-step quality gap.

use crate::error::{Error, Result};
use crate::nn::{argmax, softmax_cross_entropy, Activation, Mlp};
use crate::optim::{AdamWConfig, AdamWState};
use crate::oracle::sliced_wasserstein;
use crate::rng::rng_from;
use crate::tensor::{slice_dist, slice_dot, slice_norm, Tensor};

/// Cap applied when the within-class spread collapses.
pub const DISPERSION_CAP: f64 = 1e6;

/// Mean pairwise distance between class centroids divided by the mean
/// distance of points to their own centroid. Scale- and rotation-invariant.
pub fn dispersion_score(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows vs {} labels", labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config("dispersion_score needs at least 2 classes".into()));
    }
    let d = features.row_len();

    let mut centroids = vec![vec![0.0; d]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    let class_index = |l: usize| classes.binary_search(&l).unwrap();
    for i in 0..n {
        let c = class_index(labels[i]);
        counts[c] += 1;
        for (a, v) in centroids[c].iter_mut().zip(features.row(i)) {
            *a += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count < 2 {
            return Err(Error::Config(format!(
                "dispersion_score needs >= 2 points per class, class {} has {count}",
                classes[c]
            )));
        }
        for v in &mut centroids[c] {
            *v /= *count as f64;
        }
    }

    let mut between = 0.0;
    let mut pairs = 0usize;
    for a in 0..classes.len() {
        for b in (a + 1)..classes.len() {
            between += slice_dist(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    between /= pairs as f64;

    let mut within = 0.0;
    for i in 0..n {
        let c = class_index(labels[i]);
        within += slice_dist(features.row(i), &centroids[c]);
    }
    within /= n as f64;

    Ok((between / within.max(1e-8)).min(DISPERSION_CAP))
}

/// Per-class direction statistics of a sampled velocity field.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoherenceReport {
    /// Mean pairwise cosine of within-class velocities, mapped to [0,1].
    pub coherence: Vec<f64>,
    /// Mean cosine between class-mean directions, in [-1,1].
    pub divergence: f64,
}

/// Velocity samples are `(point, class, velocity)` triples; zero velocities
/// are excluded, a class with none left is an error.
pub fn velocity_coherence(samples: &[(Vec<f64>, usize, Vec<f64>)]) -> Result<CoherenceReport> {
    let mut classes: Vec<usize> = samples.iter().map(|(_, c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config("velocity_coherence needs >= 2 classes".into()));
    }

    let mut per_class_units: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes.len()];
    for (_, c, v) in samples {
        let norm = slice_norm(v);
        if norm > 1e-12 {
            let idx = classes.binary_search(c).unwrap();
            per_class_units[idx].push(v.iter().map(|x| x / norm).collect());
        }
    }

    let mut coherence = Vec::with_capacity(classes.len());
    let mut mean_dirs = Vec::with_capacity(classes.len());
    for (idx, units) in per_class_units.iter().enumerate() {
        if units.len() < 2 {
            return Err(Error::Config(format!(
                "class {} has fewer than 2 nonzero velocities",
                classes[idx]
            )));
        }
        let mut cos_sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..units.len() {
            for b in (a + 1)..units.len() {
                cos_sum += slice_dot(&units[a], &units[b]);
                pairs += 1;
            }
        }
        coherence.push((cos_sum / pairs as f64 + 1.0) / 2.0);

        let d = units[0].len();
        let mut mean = vec![0.0; d];
        for u in units {
            for (m, x) in mean.iter_mut().zip(u) {
                *m += x;
            }
        }
        let norm = slice_norm(&mean);
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "class {} mean direction is degenerate",
                classes[idx]
            )));
        }
        mean_dirs.push(mean.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
    }

    let mut div_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..mean_dirs.len() {
        for b in (a + 1)..mean_dirs.len() {
            div_sum += slice_dot(&mean_dirs[a], &mean_dirs[b]);
            pairs += 1;
        }
    }
    Ok(CoherenceReport { coherence, divergence: div_sum / pairs as f64 })
}

/// Train a single linear layer with softmax cross-entropy on an 80/20 split;
/// returns held-out accuracy. Deterministic per seed.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    split_seed: u64,
    epochs: usize,
) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows vs {} labels", labels.len())));
    }
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if k < 2 {
        return Err(Error::Config("linear_probe needs >= 2 classes".into()));
    }
    let n_train = (n * 4) / 5;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!("degenerate 80/20 split for n={n}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = rng_from(split_seed);
        order.shuffle(&mut rng);
    }
    let d = features.row_len();
    let mut probe = Mlp::init(&[d, k], Activation::Relu, split_seed)?;
    let mut opt = AdamWState::for_params(
        AdamWConfig::with_lr(0.05),
        &probe.params().iter().collect::<Vec<_>>(),
    )?;

    let batch = 64.min(n_train);
    let mut rng = rng_from(split_seed ^ 0x5eed);
    for _ in 0..epochs {
        for chunk_start in (0..n_train).step_by(batch) {
            let idx = &order[chunk_start..(chunk_start + batch).min(n_train)];
            let mut grads = probe.zero_grads();
            for &i in idx {
                let x = Tensor::from_vec(features.row(i).to_vec());
                let (logits, cache) = probe.forward(&x)?;
                let (_, dlogits) = softmax_cross_entropy(logits.data(), labels[i]);
                let mut up = Tensor::from_vec(dlogits);
                up.scale(1.0 / idx.len() as f64);
                let (g, _) = probe.backward(&cache, &up)?;
                grads.add_assign(&g);
            }
            let g_refs: Vec<&Tensor> = grads.tensors().iter().collect();
            let mut p_refs: Vec<&mut Tensor> = probe.params_mut().iter_mut().collect();
            opt.step(&mut p_refs, &g_refs)?;
        }
        // Reshuffle the training slice between epochs.
        use rand::seq::SliceRandom;
        order[..n_train].shuffle(&mut rng);
    }

    let mut correct = 0usize;
    for &i in &order[n_train..] {
        let x = Tensor::from_vec(features.row(i).to_vec());
        let logits = probe.eval(&x)?;
        if argmax(logits.data()) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / (n - n_train) as f64)
}

/// `10 log10(1 / MSE)` for images in [0,1]; identical images report +inf.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.require_same_shape(b, "psnr inputs")?;
    let mse = a.sq_dist(b) / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Standard Gaussian-window SSIM, per channel, averaged over channels and
/// window positions. Windows are `window x window` at stride 1, valid
/// placements only.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, 1.5, 11, 0.01, 0.03)
}

pub fn ssim_with(
    a: &Tensor,
    b: &Tensor,
    window_sigma: f64,
    window: usize,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    a.require_same_shape(b, "ssim inputs")?;
    let s = a.shape();
    let (h, w, c) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => {
            return Err(Error::Shape(format!(
                "ssim expects one H x W x C image, got {s:?}"
            )))
        }
    };
    if h < window || w < window {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than ssim window {window}"
        )));
    }

    // Normalized 2-D Gaussian kernel.
    let half = (window - 1) as f64 / 2.0;
    let mut kern = Vec::with_capacity(window * window);
    for y in 0..window {
        for x in 0..window {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            kern.push((-(dx * dx + dy * dy) / (2.0 * window_sigma * window_sigma)).exp());
        }
    }
    let ksum: f64 = kern.iter().sum();
    for v in &mut kern {
        *v /= ksum;
    }

    let c1 = (k1 * 1.0f64).powi(2);
    let c2 = (k2 * 1.0f64).powi(2);
    let at = a.data();
    let bt = b.data();
    let px = |data: &[f64], y: usize, x: usize, ch: usize| data[(y * w + x) * c + ch];

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=(h - window) {
            for ox in 0..=(w - window) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..window {
                    for x in 0..window {
                        let k = kern[y * window + x];
                        let pa = px(at, oy + y, ox + x, ch);
                        let pb = px(bt, oy + y, ox + x, ch);
                        ma += k * pa;
                        mb += k * pb;
                        va += k * pa * pa;
                        vb += k * pb * pb;
                        cov += k * pa * pb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += score;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Top-k PCA of row features. Centers the data, eigen-decomposes the sample
/// covariance with cyclic Jacobi rotations, fixes each axis's sign so its
/// largest-magnitude coordinate is positive.
pub struct PcaResult {
    pub projected: Tensor,
    /// Explained variance ratio per kept axis.
    pub explained: Vec<f64>,
    /// Kept axes, row-major `k x C`.
    pub axes: Tensor,
    pub mean: Vec<f64>,
}

pub fn pca_project(features: &Tensor, k: usize) -> Result<PcaResult> {
    let n = features.rows();
    let c = features.row_len();
    if k == 0 || k > c {
        return Err(Error::Config(format!("k must be in 1..={c}, got {k}")));
    }
    if n <= k {
        return Err(Error::Config(format!("need n > k, got n={n}, k={k}")));
    }

    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Sample covariance (divides by n-1).
    let mut cov = vec![0.0; c * c];
    for i in 0..n {
        let row = features.row(i);
        for a in 0..c {
            let da = row[a] - mean[a];
            for b in a..c {
                cov[a * c + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            let v = cov[a * c + b] / (n - 1) as f64;
            cov[a * c + b] = v;
            cov[b * c + a] = v;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigh(&cov, c);
    // Sort descending by eigenvalue.
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let total: f64 = eigvals.iter().map(|v| v.max(0.0)).sum();

    let mut axes = Tensor::zeros(&[k, c]);
    let mut explained = Vec::with_capacity(k);
    for (row, &src) in order.iter().take(k).enumerate() {
        let mut axis: Vec<f64> = (0..c).map(|r| eigvecs[r * c + src]).collect();
        // Sign convention: largest-magnitude coordinate positive.
        let mut max_i = 0;
        for (i, v) in axis.iter().enumerate() {
            if v.abs() > axis[max_i].abs() {
                max_i = i;
            }
        }
        if axis[max_i] < 0.0 {
            for v in &mut axis {
                *v = -*v;
            }
        }
        axes.row_mut(row).copy_from_slice(&axis);
        explained.push(if total > 0.0 { eigvals[src].max(0.0) / total } else { 0.0 });
    }

    let mut projected = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = features.row(i);
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for j in 0..k {
            projected.row_mut(i)[j] = slice_dot(&centered, axes.row(j));
        }
    }
    Ok(PcaResult { projected, explained, axes, mean })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigh(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = cos * aip - sin * aiq;
                    a[i * n + q] = sin * aip + cos * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = cos * api - sin * aqi;
                    a[q * n + i] = sin * api + cos * aqi;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = cos * vip - sin * viq;
                    v[i * n + q] = sin * vip + cos * viq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

/// Few-step quality gap: SW2(target, samples at `steps_low`) minus
/// SW2(target, samples at `steps_high`), with fresh target draws.
pub struct FewStepGap {
    pub sw2_low: f64,
    pub sw2_high: f64,
    pub gap: f64,
}

pub fn few_step_gap<S, T>(
    mut sample_at: S,
    mut target_draw: T,
    steps_low: usize,
    steps_high: usize,
    n: usize,
    seed: u64,
) -> Result<FewStepGap>
where
    S: FnMut(usize, usize, u64) -> Result<Tensor>,
    T: FnMut(usize, u64) -> Result<Tensor>,
{
    if steps_low > steps_high {
        return Err(Error::Config(format!(
            "steps_low {steps_low} must be <= steps_high {steps_high}"
        )));
    }
    let gen_low = sample_at(steps_low, n, seed)?;
    let gen_high = sample_at(steps_high, n, seed)?;
    let target_a = target_draw(n, seed ^ 0xa5a5)?;
    let target_b = target_draw(n, seed ^ 0x5a5a)?;
    let sw2_low = sliced_wasserstein(&target_a, &gen_low, 64, seed ^ 1)?;
    let sw2_high = sliced_wasserstein(&target_b, &gen_high, 64, seed ^ 2)?;
    Ok(FewStepGap { sw2_low, sw2_high, gap: sw2_low - sw2_high })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::Rng;

    #[test]
    fn dispersion_caps_on_collapsed_classes() {
        let feats = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let score = dispersion_score(&feats, &[0, 0, 1, 1]).unwrap();
        assert_eq!(score, DISPERSION_CAP);
    }

    #[test]
    fn dispersion_invariant_to_rotation_and_scale() {
        let mut rng = rng_from(2);
        let n = 60;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -2.0 } else { 2.0 };
            data.push(cx + 0.3 * rng.gen_range(-1.0..1.0));
            data.push(0.3 * rng.gen_range(-1.0..1.0));
            labels.push(c);
        }
        let feats = Tensor::new(vec![n, 2], data.clone()).unwrap();
        let base = dispersion_score(&feats, &labels).unwrap();

        // Rotate by 40 degrees and scale by 7.
        let (cos, sin) = (40.0f64.to_radians().cos(), 40.0f64.to_radians().sin());
        let rotated: Vec<f64> = data
            .chunks(2)
            .flat_map(|p| {
                let (x, y) = (p[0], p[1]);
                [7.0 * (cos * x - sin * y), 7.0 * (sin * x + cos * y)]
            })
            .collect();
        let feats2 = Tensor::new(vec![n, 2], rotated).unwrap();
        let other = dispersion_score(&feats2, &labels).unwrap();
        assert!((base - other).abs() < 1e-9 * base);
    }

    #[test]
    fn dispersion_shuffle_lowers_score() {
        let mut rng = rng_from(5);
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -3.0 } else { 3.0 };
            data.push(cx + rng.gen_range(-1.0..1.0));
            data.push(rng.gen_range(-1.0..1.0));
            labels.push(c);
        }
        let feats = Tensor::new(vec![n, 2], data).unwrap();
        let base = dispersion_score(&feats, &labels).unwrap();
        let mut wins = 0;
        for rep in 0..100 {
            use rand::seq::SliceRandom;
            let mut shuffled = labels.clone();
            let mut srng = rng_from(1000 + rep);
            shuffled.shuffle(&mut srng);
            let s = dispersion_score(&feats, &shuffled).unwrap();
            if s <= base {
                wins += 1;
            }
        }
        // Permutation test: p < 0.05.
        assert!(wins >= 95, "shuffled beat the labels {} times", 100 - wins);
    }

    #[test]
    fn dispersion_single_class_rejected() {
        let feats = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(dispersion_score(&feats, &[0, 0]).is_err());
    }

    #[test]
    fn coherence_identical_velocities() {
        let samples = vec![
            (vec![0.0, 0.0], 0, vec![1.0, 0.0]),
            (vec![1.0, 0.0], 0, vec![1.0, 0.0]),
            (vec![0.0, 1.0], 1, vec![-1.0, 0.0]),
            (vec![1.0, 1.0], 1, vec![-1.0, 0.0]),
        ];
        let rep = velocity_coherence(&samples).unwrap();
        assert!((rep.coherence[0] - 1.0).abs() < 1e-12);
        assert!((rep.coherence[1] - 1.0).abs() < 1e-12);
        assert!((rep.divergence + 1.0).abs() < 1e-12);
    }

    #[test]
    fn coherence_excludes_zero_velocities() {
        let samples = vec![
            (vec![0.0], 0, vec![1.0]),
            (vec![0.0], 0, vec![1.0]),
            (vec![0.0], 0, vec![0.0]),
            (vec![0.0], 1, vec![-1.0]),
            (vec![0.0], 1, vec![-1.0]),
        ];
        let rep = velocity_coherence(&samples).unwrap();
        assert!((rep.coherence[0] - 1.0).abs() < 1e-12);

        let degenerate = vec![
            (vec![0.0], 0, vec![0.0]),
            (vec![0.0], 0, vec![0.0]),
            (vec![0.0], 1, vec![1.0]),
            (vec![0.0], 1, vec![1.0]),
        ];
        assert!(velocity_coherence(&degenerate).is_err());
    }

    #[test]
    fn probe_separable_data_is_perfect() {
        let mut rng = rng_from(3);
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -4.0 } else { 4.0 };
            data.push(cx + rng.gen_range(-0.5..0.5));
            data.push(rng.gen_range(-0.5..0.5));
            labels.push(c);
        }
        let feats = Tensor::new(vec![n, 2], data).unwrap();
        let acc = linear_probe(&feats, &labels, 7, 40).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_random_labels_near_chance() {
        let mut rng = rng_from(8);
        let n = 500;
        let feats = randn(&[n, 4], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let acc = linear_probe(&feats, &labels, 5, 20).unwrap();
        // 3 sigma of Binomial(100, 0.5) on the held-out 20%.
        let sigma = (0.25f64 / 100.0).sqrt();
        assert!((acc - 0.5).abs() <= 3.0 * sigma + 0.05, "acc = {acc}");
    }

    #[test]
    fn psnr_hand_values() {
        let a = Tensor::zeros(&[4, 4, 1]);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = Tensor::filled(&[4, 4, 1], 0.1);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "psnr = {db}");
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let cfg = crate::datagen::ShapeGenConfig::new(1, 4, 16, 3);
        let ds = crate::datagen::gen_shapes(&cfg).unwrap();
        let img = Tensor::new(vec![16, 16, 3], ds.image(0).to_vec()).unwrap();
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);

        let mut inv = img.clone();
        for v in inv.data_mut() {
            *v = 1.0 - *v;
        }
        let s = ssim(&img, &inv).unwrap();
        assert!(s < 0.5, "inverted ssim = {s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(&[8, 8, 1]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn pca_line_explains_everything() {
        let mut data = Vec::new();
        for i in 0..50 {
            let t = i as f64 / 10.0;
            data.push(2.0 * t);
            data.push(-t);
        }
        let feats = Tensor::new(vec![50, 2], data).unwrap();
        let res = pca_project(&feats, 1).unwrap();
        assert!((res.explained[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_full_rank_reconstruction_and_isometry() {
        let mut rng = rng_from(4);
        let feats = randn(&[40, 5], &mut rng);
        let res = pca_project(&feats, 5).unwrap();
        // Reconstruct: x = mean + proj . axes.
        for i in 0..40 {
            let mut rec = res.mean.clone();
            for j in 0..5 {
                let p = res.projected.row(i)[j];
                for (r, ax) in rec.iter_mut().zip(res.axes.row(j)) {
                    *r += p * ax;
                }
            }
            assert!(slice_dist(&rec, feats.row(i)) < 1e-9);
        }
        // Pairwise distances preserved at k = C.
        for i in 0..10 {
            for j in 0..10 {
                let d_orig = slice_dist(feats.row(i), feats.row(j));
                let d_proj = slice_dist(res.projected.row(i), res.projected.row(j));
                assert!((d_orig - d_proj).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn few_step_gap_zero_when_budgets_equal() {
        let sample = |_steps: usize, n: usize, seed: u64| -> Result<Tensor> {
            let mut rng = rng_from(seed);
            Ok(randn(&[n, 2], &mut rng))
        };
        let target = |n: usize, seed: u64| -> Result<Tensor> {
            let mut rng = rng_from(seed);
            Ok(randn(&[n, 2], &mut rng))
        };
        let g = few_step_gap(sample, target, 5, 5, 500, 3).unwrap();
        // Same generator and same seed at both budgets; only the fresh target
        // draw differs, so the gap sits inside the resampling noise.
        assert!(g.gap.abs() < 0.1, "gap = {}", g.gap);
    }
}
