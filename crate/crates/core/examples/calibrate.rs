//! Development-time measurement harness; prints the statistics the
//! acceptance thresholds are frozen against. Run sections by name:
//! `cargo run --release --example calibrate -- oracle codec flow2d`

use svgl_core::codec::*;
use svgl_core::datagen::*;
use svgl_core::flow::*;
use svgl_core::interpolant::Interpolant;
use svgl_core::metrics::*;
use svgl_core::nn::randn;
use svgl_core::oracle::*;
use svgl_core::rng::{derive_seed, rng_from};
use svgl_core::sampler::*;
use svgl_core::tensor::{slice_dist, slice_norm, Tensor};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let run = |name: &str| args.is_empty() || args.iter().any(|a| a == name);

    if run("oracle") {
        oracle_section();
    }
    if run("euler") {
        euler_section();
    }
    if run("codec") {
        codec_section();
    }
    if run("flow2d") {
        flow2d_section();
    }
    if run("flow40") {
        flow40_section();
    }
    if run("edit") {
        edit_section();
    }
}

fn oracle_section() {
    println!("== oracle ==");
    let t0 = std::time::Instant::now();
    for preset in [MixturePreset::Dispersed, MixturePreset::Entangled] {
        let spec = make_mixture(preset, 2, 0).unwrap();
        // Few-step gap at 5 vs 100 steps, n=10k, class-conditional sampling.
        let sample_at = |steps: usize, n: usize, seed: u64| {
            oracle_conditional_samples(&spec, n, steps, seed)
        };
        let target = |n: usize, seed: u64| Ok(sample_mixture(&spec, n, seed).unwrap().points);
        let gap = few_step_gap(sample_at, target, 5, 100, 10_000, 42).unwrap();
        println!(
            "{preset:?}: sw2_low={:.5} sw2_high={:.5} gap={:.5}",
            gap.sw2_low, gap.sw2_high, gap.gap
        );

        // Noise floor: SW2 between independent target draws.
        let mut floors = Vec::new();
        for rep in 0..10 {
            let a = sample_mixture(&spec, 10_000, 9000 + rep).unwrap().points;
            let b = sample_mixture(&spec, 10_000, 9100 + rep).unwrap().points;
            floors.push(sliced_wasserstein(&a, &b, 64, 7).unwrap());
        }
        let mean = floors.iter().sum::<f64>() / floors.len() as f64;
        let max = floors.iter().cloned().fold(0.0f64, f64::max);
        println!("  noise floor mean={mean:.5} max={max:.5}");

        // Coherence at t=0.5 over a shared marginal grid.
        let mut rng = rng_from(5);
        let mut samples = Vec::new();
        for _ in 0..200 {
            let x = marginal_point(&spec, 0.5, &mut rng);
            for class in spec.class_ids() {
                let cond = spec.conditional(class).unwrap();
                let v = oracle_velocity(&cond, &x, 0.5).unwrap();
                samples.push((x.clone(), class, v));
            }
        }
        let rep = velocity_coherence(&samples).unwrap();
        println!("  coherence={:?} divergence={:.4}", rep.coherence, rep.divergence);
    }
    // Marginal-field divergence at the two class centroids (dispersed).
    let spec = make_mixture(MixturePreset::Dispersed, 2, 0).unwrap();
    let c0 = spec.class_centroid(0).unwrap();
    let c1 = spec.class_centroid(1).unwrap();
    let v0 = oracle_velocity(&spec, &c0, 0.5).unwrap();
    let v1 = oracle_velocity(&spec, &c1, 0.5).unwrap();
    let cos = svgl_core::tensor::slice_dot(&v0, &v1) / (slice_norm(&v0) * slice_norm(&v1));
    println!("centroid-velocity cosine (dispersed, t=0.5): {cos:.4}");
    let v_axis = oracle_velocity(&spec, &[0.0, 1.0], 0.5).unwrap();
    println!("axis velocity magnitude: {:.6} vs centroid {:.4}", slice_norm(&v_axis), slice_norm(&v0));
    println!("oracle section: {:?}", t0.elapsed());
}

fn euler_section() {
    println!("== euler order ==");
    let t0 = std::time::Instant::now();
    let spec = make_mixture(MixturePreset::Dispersed, 2, 0).unwrap();
    let delta = 1e-3;
    let reference = |noise: &Tensor, steps: usize| -> Tensor {
        let grid: Vec<f64> = (0..=steps)
            .map(|k| (1.0 - delta) + ((delta) - (1.0 - delta)) * k as f64 / steps as f64)
            .collect();
        let out = integrate(|x, t| Ok(Tensor::from_vec(oracle_velocity(&spec, x.data(), t).unwrap())), &grid, noise, false).unwrap();
        out.endpoint
    };
    let mut rng = rng_from(17);
    let mut errs = vec![0.0f64; 5];
    let n_traj = 64;
    for _ in 0..n_traj {
        let noise = randn(&[2], &mut rng);
        let truth = reference(&noise, 512);
        for (i, steps) in [8usize, 16, 32, 64, 128].iter().enumerate() {
            let x = reference(&noise, *steps);
            errs[i] += slice_dist(x.data(), truth.data());
        }
    }
    for e in &mut errs {
        *e /= n_traj as f64;
    }
    println!("mean endpoint errors {errs:?}");
    for w in errs.windows(2) {
        println!("  ratio {:.3}", w[0] / w[1]);
    }
    println!("euler section: {:?}", t0.elapsed());
}

fn report(name: &str, codec: &SvgCodec, test: &ShapeImageDataset, test_flat: &Tensor) -> f64 {
    let recon = codec.reconstruct(test_flat).unwrap();
    let recon_rows = Tensor::new(vec![test.len(), test.image_dim()], recon.data().to_vec()).unwrap();
    let psnr_v = mean_psnr(&recon_rows, test_flat).unwrap();
    let feats = codec.encode(test_flat).unwrap();
    let disp = dispersion_score(&feats, &test.labels).unwrap();
    let probe = linear_probe(&feats, &test.labels, 3, 30).unwrap();
    let res_feats = codec.residual.eval(test_flat).unwrap();
    let rstats = ChannelStats::compute(&res_feats).unwrap();
    let (rm, rs) = rstats.pooled();
    println!("{name}: psnr={psnr_v:.2} disp={disp:.4} probe={probe:.4} res pooled mean {rm:.4} std {rs:.4}");
    psnr_v
}

fn codec_section() {
    println!("== codec ==");
    let t0 = std::time::Instant::now();
    let ds = gen_shapes(&ShapeGenConfig::new(2048, 4, 16, 101)).unwrap();
    let (train, test) = ds.split_at(1536).unwrap();
    println!("gen+split: {:?}", t0.elapsed());

    let sem_cfg = SemanticConfig::default();
    let sem = SemanticEncoder::pretrain(&train, &sem_cfg, 11).unwrap();
    println!("semantic head acc {:.4} ({:?})", sem.meta.head_accuracy, t0.elapsed());

    let train_flat = train.flattened();
    let test_flat = test.flattened();
    let sem_train = sem.encode(&train_flat).unwrap();
    let sem_test = sem.encode(&test_flat).unwrap();
    let sem_stats = ChannelStats::compute(&sem_train).unwrap();
    let (pm, ps) = sem_stats.pooled();
    let mut stds = sem_stats.std.clone();
    stds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "semantic pooled stats: mean {pm:.4} std {ps:.4} | channel stds min {:.4} med {:.4} max {:.4}",
        stds[0], stds[stds.len() / 2], stds[stds.len() - 1]
    );

    // Probe + dispersion on semantic features and raw pixels.
    let probe_sem = linear_probe(&sem_test, &test.labels, 3, 30).unwrap();
    let disp_sem = dispersion_score(&sem_test, &test.labels).unwrap();
    let disp_raw = dispersion_score(&test_flat, &test.labels).unwrap();
    println!("probe(sem)={probe_sem:.4} disp(sem)={disp_sem:.4} disp(raw)={disp_raw:.4}");

    // Stage 1 at several alignment weights, paired seeds.
    let s1 = Stage1Config::default();
    let mut main_psnr = 0.0;
    for aw in [0.1, 0.05, 0.02] {
        let cfg = Stage1Config { align_weight: aw, ..s1.clone() };
        let codec = train_codec_stage1(sem.clone(), &train, &cfg, 21).unwrap().codec;
        let p = report(&format!("aw={aw}"), &codec, &test, &test_flat);
        if aw == s1.align_weight {
            main_psnr = p;
        }
    }
    let aligned_psnr = main_psnr;
    let unaligned_cfg = Stage1Config { align_weight: 0.0, ..s1.clone() };
    let unaligned = train_codec_stage1(sem.clone(), &train, &unaligned_cfg, 21).unwrap().codec;
    println!("stage1 sweeps done ({:?})", t0.elapsed());
    let sem_dec = train_semantic_only_decoder(&sem, &train, &s1, 21).unwrap();

    let psnr_full = aligned_psnr;
    report("unaligned", &unaligned, &test, &test_flat);
    let sem_recon = decode_semantic_only(&sem_dec, &sem_test).unwrap();
    let psnr_sem = mean_psnr(&sem_recon, &test_flat).unwrap();
    println!("semantic-only decoder psnr={psnr_sem:.2} delta={:.2}", psnr_full - psnr_sem);

    // Baseline VAE.
    let base = train_baseline_vae(&train, &BaselineConfig::default(), 31).unwrap();
    let brecon = base.reconstruct(&test_flat).unwrap();
    let brows = Tensor::new(vec![test.len(), test.image_dim()], brecon.data().to_vec()).unwrap();
    let bpsnr = mean_psnr(&brows, &test_flat).unwrap();
    let bfeats = base.encode(&test_flat).unwrap();
    let bdisp = dispersion_score(&bfeats, &test.labels).unwrap();
    println!("baseline: psnr={bpsnr:.2} disp={bdisp:.4}");
    println!("codec section: {:?}", t0.elapsed());
}

fn flow2d_section() {
    println!("== flow 2d ==");
    let t0 = std::time::Instant::now();
    for preset in [MixturePreset::Dispersed, MixturePreset::Entangled] {
        let spec = make_mixture(preset, 2, 0).unwrap();
        let pts = sample_mixture(&spec, 20_000, 71).unwrap();
        let mut net = VelocityNet::init(VelocityNetConfig::new(2, 2), 13).unwrap();
        let cfg = FlowTrainConfig {
            batch: 256,
            lr: 1e-3,
            iterations: 3000,
            label_drop_prob: 0.1,
            seed: 5,
            ..FlowTrainConfig::default()
        };
        let out = train_flow(&mut net, &pts.points, &pts.labels, Interpolant::Linear, &cfg).unwrap();
        let n = out.loss_curve.len();
        println!(
            "{preset:?}: loss {:.4} -> {:.4} ({:?})",
            out.loss_curve[..n / 10].iter().sum::<f64>() / (n / 10) as f64,
            out.loss_curve[n - n / 10..].iter().sum::<f64>() / (n / 10) as f64,
            t0.elapsed()
        );

        // Grid MSE vs the closed-form field at marginal points.
        let mut rng = rng_from(23);
        let mut mse = 0.0;
        let mut count = 0;
        for ti in 1..=9 {
            let t = ti as f64 / 10.0;
            for _ in 0..200 {
                let x = marginal_point(&spec, t, &mut rng);
                let exact = oracle_velocity(&spec, &x, t).unwrap();
                let xt = Tensor::from_vec(x);
                // Marginal field = class-weighted oracle; compare against the
                // null-class prediction.
                let pred = net.velocity(&xt, t, None).unwrap();
                mse += slice_dist(pred.data(), &exact).powi(2);
                count += 1;
            }
        }
        println!("  grid mse (null-class vs marginal oracle) = {:.5}", mse / count as f64);

        // Conditional grid MSE.
        let mut mse_c = 0.0;
        let mut count_c = 0;
        let mut rng = rng_from(29);
        for ti in 1..=9 {
            let t = ti as f64 / 10.0;
            for class in spec.class_ids() {
                let cond = spec.conditional(class).unwrap();
                for _ in 0..100 {
                    let x = marginal_point(&cond, t, &mut rng);
                    let exact = oracle_velocity(&cond, &x, t).unwrap();
                    let pred = net.velocity(&Tensor::from_vec(x), t, Some(class)).unwrap();
                    mse_c += slice_dist(pred.data(), &exact).powi(2);
                    count_c += 1;
                }
            }
        }
        println!("  grid mse (conditional) = {:.5}", mse_c / count_c as f64);

        // Few-step gap with the trained net, class-conditional, w=1.
        let sample_at = |steps: usize, n: usize, seed: u64| -> svgl_core::error::Result<Tensor> {
            let cfg = SamplerConfig { steps, guidance_w: 1.0, zero_init: false, shift_s: 1.0, seed };
            let mut data = Vec::with_capacity(n * 2);
            for i in 0..n {
                let mut rng = rng_from(derive_seed(seed, i as u64));
                let noise = randn(&[2], &mut rng);
                let out = euler_sample(&net, &cfg, &noise, Some(i % 2)).map_err(svgl_core::error::Error::from)?;
                data.extend_from_slice(out.endpoint.data());
            }
            Tensor::new(vec![n, 2], data)
        };
        let target = |n: usize, seed: u64| Ok(sample_mixture(&spec, n, seed).unwrap().points);
        let gap = few_step_gap(sample_at, target, 5, 100, 10_000, 42).unwrap();
        println!("  net gap: sw2_low={:.5} sw2_high={:.5} gap={:.5}", gap.sw2_low, gap.sw2_high, gap.gap);
        println!("  ({:?})", t0.elapsed());
    }
}

fn flow40_section() {
    println!("== flow 40d (aligned vs unaligned) ==");
    let t0 = std::time::Instant::now();
    let ds = gen_shapes(&ShapeGenConfig::new(2048, 4, 16, 101)).unwrap();
    let (train, test) = ds.split_at(1536).unwrap();
    let sem = SemanticEncoder::pretrain(&train, &SemanticConfig::default(), 11).unwrap();
    let s1 = Stage1Config::default();
    for (name, aw) in [("aligned", s1.align_weight), ("unaligned", 0.0)] {
        let cfg = Stage1Config { align_weight: aw, ..s1.clone() };
        let codec = train_codec_stage1(sem.clone(), &train, &cfg, 21).unwrap().codec;
        let train_flat = train.flattened();
        let feats = codec.encode(&train_flat).unwrap();
        let normed = normalize(&feats, &codec.stats).unwrap();
        let mut net = VelocityNet::init(
            VelocityNetConfig { hidden: 96, ..VelocityNetConfig::new(codec.feature_width(), 4) },
            13,
        )
        .unwrap();
        let fcfg = FlowTrainConfig {
            batch: 256,
            lr: 1e-3,
            iterations: 3000,
            label_drop_prob: 0.1,
            seed: 5,
            ..FlowTrainConfig::default()
        };
        let out = train_flow(&mut net, &normed, &train.labels, Interpolant::Linear, &fcfg).unwrap();
        let n = out.loss_curve.len();
        println!(
            "{name}: loss {:.4} -> {:.4}",
            out.loss_curve[..n / 10].iter().sum::<f64>() / (n / 10) as f64,
            out.loss_curve[n - n / 10..].iter().sum::<f64>() / (n / 10) as f64
        );

        // 5-step SW2 of generated features vs held-out encoded features.
        let test_flat = test.flattened();
        let test_feats = normalize(&codec.encode(&test_flat).unwrap(), &codec.stats).unwrap();
        let n_gen = test.len();
        for steps in [5usize, 100] {
            let cfg = SamplerConfig { steps, guidance_w: 1.0, zero_init: false, shift_s: 1.0, seed: 3 };
            let mut data = Vec::new();
            for i in 0..n_gen {
                let mut rng = rng_from(derive_seed(3, i as u64));
                let noise = randn(&[codec.feature_width()], &mut rng);
                let out = euler_sample(&net, &cfg, &noise, Some(i % 4)).unwrap();
                data.extend_from_slice(out.endpoint.data());
            }
            let gen = Tensor::new(vec![n_gen, codec.feature_width()], data).unwrap();
            let sw2 = sliced_wasserstein(&gen, &test_feats, 64, 7).unwrap();
            println!("  {steps}-step sw2(gen, held-out feats) = {sw2:.5}");
        }
        println!("  ({:?})", t0.elapsed());
    }
}

fn edit_section() {
    println!("== edit ==");
    let t0 = std::time::Instant::now();
    let ds = gen_shapes(&ShapeGenConfig::new(2048, 4, 16, 101)).unwrap();
    let (train, test) = ds.split_at(1536).unwrap();
    let sem = SemanticEncoder::pretrain(&train, &SemanticConfig::default(), 11).unwrap();
    let codec = train_codec_stage1(sem, &train, &Stage1Config::default(), 21).unwrap().codec;
    let train_flat = train.flattened();
    let feats = codec.encode(&train_flat).unwrap();
    let normed = normalize(&feats, &codec.stats).unwrap();
    let mut net = VelocityNet::init(
        VelocityNetConfig { hidden: 96, ..VelocityNetConfig::new(codec.feature_width(), 4) },
        13,
    )
    .unwrap();
    let fcfg = FlowTrainConfig {
        batch: 256,
        lr: 1e-3,
        iterations: 3000,
        label_drop_prob: 0.1,
        seed: 5,
        ..FlowTrainConfig::default()
    };
    train_flow(&mut net, &normed, &train.labels, Interpolant::Linear, &fcfg).unwrap();
    println!("trained ({:?})", t0.elapsed());

    let test_flat = test.flattened();
    let image = Tensor::from_vec(test_flat.row(0).to_vec());
    let label = test.labels[0];
    let recon_full = codec.reconstruct(&Tensor::new(vec![1, 768], image.data().to_vec()).unwrap()).unwrap();
    let recon = Tensor::from_vec(recon_full.data().to_vec());

    // Identity edit: empty mask, same class, w=1.
    let empty = soften_mask(&Tensor::zeros(&[16, 16]), 1.0).unwrap();
    let cfg = EditConfig {
        t_edit: 0.8,
        steps: 100,
        guidance_w: 1.0,
        shift_s: 0.4,
        blur_sigma: 1.0,
        source_class: Some(label),
        seed: 9,
    };
    let edited = masked_edit(&net, &codec, &image, &empty, label, &cfg).unwrap();
    let rel = slice_dist(edited.data(), recon.data()) / slice_norm(recon.data());
    println!("identity edit rel L2 = {:.4}", rel);

    // Preserved-region check with an interior box mask, different class.
    let mut raw = Tensor::zeros(&[16, 16]);
    for y in 4..12 {
        for x in 4..12 {
            raw.data_mut()[y * 16 + x] = 1.0;
        }
    }
    let boxmask = soften_mask(&raw, 1.0).unwrap();
    let cfg2 = EditConfig { guidance_w: 4.0, source_class: Some(label), ..cfg.clone() };
    let new_class = (label + 1) % 4;
    let edited = masked_edit(&net, &codec, &image, &boxmask, new_class, &cfg2).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..16 {
        for x in 0..16 {
            if boxmask.raw.data()[y * 16 + x] == 0.0 {
                for ch in 0..3 {
                    let i = (y * 16 + x) * 3 + ch;
                    let d = edited.data()[i] - recon.data()[i];
                    num += d * d;
                    den += recon.data()[i] * recon.data()[i];
                }
            }
        }
    }
    println!("preserved-region rel L2 = {:.4}", (num / den).sqrt());

    // Full-mask edit vs plain conditional sampling, SW2 in pixel space.
    let ones = soften_mask(&Tensor::filled(&[16, 16], 1.0), 1.0).unwrap();
    let cfg3 = EditConfig { t_edit: 1.0, guidance_w: 1.55, source_class: Some(label), ..cfg.clone() };
    let n_cmp = 128;
    let mut edits = Vec::new();
    let mut plains = Vec::new();
    for i in 0..n_cmp {
        let img_i = Tensor::from_vec(test_flat.row(i % test.len()).to_vec());
        let class = (i % 4) as usize;
        let e = masked_edit(&net, &codec, &img_i, &ones, class, &EditConfig { seed: 1000 + i as u64, ..cfg3.clone() }).unwrap();
        edits.extend_from_slice(e.data());
        let scfg = SamplerConfig { steps: 100, guidance_w: 1.55, zero_init: false, shift_s: 0.4, seed: 0 };
        let mut rng = rng_from(derive_seed(5000, i as u64));
        let noise = randn(&[codec.feature_width()], &mut rng);
        let out = euler_sample(&net, &scfg, &noise, Some(class)).unwrap();
        let f = Tensor::new(vec![1, codec.feature_width()], out.endpoint.into_data()).unwrap();
        let img = codec.decode(&denormalize(&f, &codec.stats).unwrap()).unwrap();
        plains.extend_from_slice(img.data());
    }
    let ea = Tensor::new(vec![n_cmp, 768], edits).unwrap();
    let pa = Tensor::new(vec![n_cmp, 768], plains).unwrap();
    let sw2 = sliced_wasserstein(&ea, &pa, 32, 7).unwrap();
    // Noise floor: two plain conditional sets.
    let mut plains2 = Vec::new();
    for i in 0..n_cmp {
        let scfg = SamplerConfig { steps: 100, guidance_w: 1.55, zero_init: false, shift_s: 0.4, seed: 0 };
        let mut rng = rng_from(derive_seed(7000, i as u64));
        let noise = randn(&[codec.feature_width()], &mut rng);
        let out = euler_sample(&net, &scfg, &noise, Some((i % 4) as usize)).unwrap();
        let f = Tensor::new(vec![1, codec.feature_width()], out.endpoint.into_data()).unwrap();
        let img = codec.decode(&denormalize(&f, &codec.stats).unwrap()).unwrap();
        plains2.extend_from_slice(img.data());
    }
    let pb = Tensor::new(vec![n_cmp, 768], plains2).unwrap();
    let floor = sliced_wasserstein(&pb, &pa, 32, 7).unwrap();
    println!("full-mask sw2 = {sw2:.5}, plain-vs-plain floor = {floor:.5}");
    println!("edit section: {:?}", t0.elapsed());
}
