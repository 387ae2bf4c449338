//! Scratch throughput probe for sizing the toy experiment. Not part of the
//! test suite.

use std::time::Instant;

use relit_core::dataset::{render_dataset, Dataset, DatasetConfig};
use relit_core::diffusion::NoiseSchedule;
use relit_nn::{Denoiser, UNetConfig};
use relit_pipeline::optimizer::AdamW;
use relit_pipeline::trainer::{
    sample_training_tuple, train_step, Stage, TrainConfig, TrainRngs, Variant,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("all");

    let root = std::path::PathBuf::from("/tmp/probe_data");
    if !root.join("dataset.json").exists() {
        let t0 = Instant::now();
        let dc = DatasetConfig {
            n_objects: 8,
            n_views: 8,
            n_envs: 5,
            resolution: 64,
            env_height: 16,
            seed: 11,
            spp: 1,
            camera_radius: 2.5,
            fov_y: 50.0,
        };
        render_dataset(&dc, &root).unwrap();
        println!("dataset render (8 obj x 8 views x 5 envs @64, env 16): {:?}", t0.elapsed());
    }
    let ds = Dataset::open(&root).unwrap();

    let mut model_cfg = UNetConfig::base();
    model_cfg.base_channels = 16;
    model_cfg.channel_mults = vec![1, 2, 4];
    model_cfg.groups = 8;
    model_cfg.attn_levels = 1;
    model_cfg.lighting_levels = 2;

    let bench = |stage: Stage, k: usize, res: usize, steps: usize, mv: bool| {
        let mut tc = TrainConfig::for_stage(stage);
        tc.k = k;
        tc.resolution = res;
        tc.t_max = 1000;
        tc.learning_rate = 2e-3;
        let mut cfg = model_cfg.clone();
        cfg.multi_view = mv;
        let (model, mut store) = Denoiser::build::<f32>(cfg).unwrap();
        println!("{stage} params: {}", store.len());
        let schedule = NoiseSchedule::cosine(tc.t_max).unwrap();
        let mut opt = AdamW::new(tc.learning_rate, store.len());
        let mut rngs = TrainRngs::new(1);
        let kk = tc.effective_k();
        // warmup
        let batch = vec![sample_training_tuple(&ds, &[0, 1, 2, 3], kk, res, &mut rngs.sampler).unwrap()];
        train_step(&model, &mut store, &mut opt, &schedule, &batch, &tc, &mut rngs).unwrap();
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let batch =
                vec![sample_training_tuple(&ds, &[0, 1, 2, 3], kk, res, &mut rngs.sampler).unwrap()];
            loss_sum +=
                train_step(&model, &mut store, &mut opt, &schedule, &batch, &tc, &mut rngs).unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / steps as f64;
        println!(
            "{stage} k={kk} res={res}: {:.3} s/step (mean loss {:.4})",
            per,
            loss_sum / steps as f64
        );
        per
    };

    match mode {
        "grid" => {
            // Full acceptance-scale grid (3 variants x 3 seeds) into a
            // reusable directory; prints everything criterion 6 looks at.
            let out = std::path::PathBuf::from(
                args.get(2).map(String::as_str).unwrap_or("/tmp/probe_grid"),
            );
            let cfg = relit_pipeline::experiment::ToyConfig::acceptance(&out);
            let t0 = Instant::now();
            let outcome = relit_pipeline::experiment::run_toy_experiment(&cfg).unwrap();
            println!("grid took {:?}", t0.elapsed());
            for r in &outcome.runs {
                println!(
                    "{} seed {}: SLR {:.2} ILR {:.2} SSIM {:.3}",
                    r.variant, r.seed, r.slr_psnr, r.ilr_psnr, r.slr_ssim
                );
            }
            println!("ordering_ok_seeds: {:?}", outcome.ordering_ok_seeds);
            for sp in &outcome.spreads {
                println!(
                    "spread seed {}: grouped {:.4} vs independent {:.4}",
                    sp.relight_seed, sp.spread_grouped, sp.spread_independent
                );
            }
            println!("mean full SLR {:.2}", outcome.mean_slr(Variant::Full));
        }
        "toy" => {
            // One full run at reduced scale; prints SLR/ILR for the gate.
            let out = std::path::PathBuf::from(
                args.get(2).map(String::as_str).unwrap_or("/tmp/probe_toy"),
            );
            let mut cfg = relit_pipeline::experiment::ToyConfig::acceptance(&out);
            if let Some(iters) = args.get(3) {
                let parts: Vec<usize> =
                    iters.split(',').map(|s| s.parse().unwrap()).collect();
                cfg.stage_iterations = [parts[0], parts[1], parts[2]];
            }
            if let Some(res) = args.get(4) {
                let parts: Vec<usize> =
                    res.split(',').map(|s| s.parse().unwrap()).collect();
                cfg.stage_resolutions = [parts[0], parts[1], parts[2]];
            }
            cfg.variants = vec![Variant::Full];
            cfg.seeds = vec![1];
            cfg.spread_seeds = vec![101];
            if let Some(gs) = args.get(5) {
                cfg.guidance_scale = gs.parse().unwrap();
            }
            if let Some(steps) = args.get(6) {
                cfg.relight_steps = steps.parse().unwrap();
            }
            let t0 = Instant::now();
            let outcome = relit_pipeline::experiment::run_toy_experiment(&cfg).unwrap();
            println!("toy run took {:?}", t0.elapsed());
            for r in &outcome.runs {
                println!(
                    "{} seed {}: SLR {:.2} ILR {:.2} SSIM {:.3} loss {:.3} -> {:.3}",
                    r.variant, r.seed, r.slr_psnr, r.ilr_psnr, r.slr_ssim, r.initial_loss, r.final_loss
                );
            }
            for s in &outcome.spreads {
                println!(
                    "spread seed {}: grouped {:.4} vs independent {:.4}",
                    s.relight_seed, s.spread_grouped, s.spread_independent
                );
            }
        }
        "diag" => {
            use relit_core::diffusion::{add_noise, v_target};
            use relit_core::metrics::{evaluate, EvalView, ObjectEval, RescaleMode};
            use relit_core::dataset::mask_from_orm;
            use relit_nn::load_model;
            use relit_pipeline::experiment::{ensure_dataset, source_views, ToyConfig};
            use relit_pipeline::scheduler::{relight, RelightConfig};

            let out = std::path::PathBuf::from(
                args.get(2).map(String::as_str).unwrap_or("/tmp/probe_toy"),
            );
            let cfg = ToyConfig::acceptance(&out);
            let ds = ensure_dataset(&cfg).unwrap();
            let ckpt = out.join("full_s1").join("ckpt_upscale.rlck");
            let (model, store) = load_model::<f32>(&ckpt).unwrap();
            let schedule = NoiseSchedule::cosine(cfg.t_max).unwrap();
            let res = cfg.stage_resolutions[2];

            // Teacher-forced v error on a train tuple at several timesteps.
            let mut tc = TrainConfig::for_stage(Stage::Multi);
            tc.resolution = res;
            tc.k = cfg.k;
            let mut rngs = TrainRngs::new(7);
            let train_envs: Vec<usize> = (0..cfg.train_envs).collect();
            let (sviews, senv) =
                sample_training_tuple(&ds, &train_envs, cfg.k, res, &mut rngs.sampler).unwrap();
            let codec = relit_core::codec::Codec::Pixel;
            let mut packs = Vec::new();
            let mut tgts = Vec::new();
            for view in &sviews {
                tgts.push(relit_pipeline::image_to_model(&view.x_tgt));
                packs.push(
                    relit_nn::build_conditioning(
                        &relit_pipeline::image_to_model(&view.x_src),
                        &view.materials.i_d,
                        &view.materials.i_orm,
                        &view.plucker,
                        &codec,
                        tc.flags(),
                    )
                    .unwrap(),
                );
            }
            let cond = relit_nn::stack_packs::<f32>(&packs).unwrap();
            let z0 = relit_nn::encode_views::<f32>(&codec, &tgts).unwrap();
            let tokens =
                relit_nn::lighting_tokens::<f32>(&senv, cfg.lighting_grid, false).unwrap();
            use rand::SeedableRng;
            let mut nrng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            for &t in &[100usize, 300, 500, 800] {
                let mut noise = ndarray::Array4::<f32>::zeros(z0.raw_dim());
                for v in noise.iter_mut() {
                    *v = rand::Rng::sample(&mut nrng, rand_distr::StandardNormal);
                }
                let zt = add_noise(&z0, &noise, t, &schedule).unwrap();
                let vt = v_target(&z0, &noise, t, &schedule).unwrap();
                let pred = relit_nn::denoise(&model, &store, &zt, t as f64, &cond, &tokens).unwrap();
                let err = (&pred - &vt).mapv(|d| d * d).mean().unwrap();
                let base = vt.mapv(|d| d * d).mean().unwrap();
                println!("t={t}: v-MSE {err:.4} (target power {base:.4})");
            }

            // One-step x0 estimate quality (teacher-forced) and partial-noise
            // DDIM starts, object 0, held-out env.
            {
                use relit_core::diffusion::inference_timesteps;
                let env_id = cfg.held_out_env();
                let env = ds.env(env_id).unwrap();
                let views = source_views(&ds, 0, cfg.src_env, res).unwrap();
                let flags = tc.flags();
                let cond = relit_pipeline::conditioning_for_views(&views, flags).unwrap();
                let tokens =
                    relit_nn::lighting_tokens::<f32>(&env, cfg.lighting_grid, false).unwrap();
                // Ground-truth latents for this object/env.
                let mut tgts = Vec::new();
                for v in 0..views.len() {
                    let gt = ds.radiance(0, env_id, v).unwrap();
                    let gt = if gt.dim().0 == res {
                        gt
                    } else {
                        relit_core::resample::resize_area(&gt, res, res)
                    };
                    tgts.push(relit_pipeline::image_to_model(&gt));
                }
                let z0 =
                    relit_nn::encode_views::<f32>(&relit_core::codec::Codec::Pixel, &tgts).unwrap();
                let eval_z = |z: &ndarray::Array4<f32>, label: &str| {
                    let decoded: Vec<ndarray::Array3<f32>> =
                        relit_nn::decode_views(&relit_core::codec::Codec::Pixel, z)
                            .iter()
                            .map(relit_pipeline::model_to_image)
                            .collect();
                    let mut eval_views = Vec::new();
                    for (v, pred) in decoded.into_iter().enumerate() {
                        let gt = ds.radiance(0, env_id, v).unwrap();
                        let gt = if gt.dim().0 == res {
                            gt
                        } else {
                            relit_core::resample::resize_area(&gt, res, res)
                        };
                        let mask = mask_from_orm(&views[v].i_orm);
                        let pred = pred.mapv(|x| relit_core::math::tonemap(x as f64) as f32);
                        let gt = gt.mapv(|x| relit_core::math::tonemap(x as f64) as f32);
                        eval_views.push(EvalView { pred, gt, mask });
                    }
                    let obj = ObjectEval { object_id: "o0".into(), views: eval_views };
                    let rep = evaluate(std::slice::from_ref(&obj), RescaleMode::Slr).unwrap();
                    println!("{label}: SLR {:.2} dB", rep.dataset_mean_psnr);
                };
                let mut nrng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
                let mut noise = ndarray::Array4::<f32>::zeros(z0.raw_dim());
                for v in noise.iter_mut() {
                    *v = rand::Rng::sample(&mut nrng, rand_distr::StandardNormal);
                }
                for &t in &[300usize, 500, 800, 1000] {
                    let zt = add_noise(&z0, &noise, t, &schedule).unwrap();
                    let mut x0e = ndarray::Array4::<f32>::zeros(z0.raw_dim());
                    for g0 in (0..views.len()).step_by(4) {
                        let idx: Vec<usize> = (g0..(g0 + 4).min(views.len())).collect();
                        let zg = zt.select(ndarray::Axis(0), &idx);
                        let cg = cond.select(ndarray::Axis(0), &idx);
                        let v =
                            relit_nn::denoise(&model, &store, &zg, t as f64, &cg, &tokens).unwrap();
                        let a = schedule.alpha_at(t).unwrap() as f32;
                        let s = schedule.sigma_at(t).unwrap() as f32;
                        let x0g = zg.mapv(|zz| zz * a) - &v.mapv(|vv| vv * s);
                        for (r, &i) in idx.iter().enumerate() {
                            x0e.index_axis_mut(ndarray::Axis(0), i)
                                .assign(&x0g.index_axis(ndarray::Axis(0), r));
                        }
                    }
                    eval_z(&x0e, &format!("one-step x0 from t={t}"));
                }
                // Partial-noise starts: teacher-forced z_t, then model DDIM to 0.
                for &t_start in &[300usize, 500, 800] {
                    let mut z = add_noise(&z0, &noise, t_start, &schedule).unwrap();
                    let all: Vec<usize> = inference_timesteps(cfg.t_max, 25).unwrap();
                    let ts: Vec<usize> = std::iter::once(t_start)
                        .chain(all.iter().copied().filter(|&t| t < t_start))
                        .collect();
                    for w in ts.windows(2) {
                        let (t, t_next) = (w[0], w[1]);
                        let mut v_all = ndarray::Array4::<f32>::zeros(z.raw_dim());
                        for g0 in (0..views.len()).step_by(4) {
                            let idx: Vec<usize> = (g0..(g0 + 4).min(views.len())).collect();
                            let zg = z.select(ndarray::Axis(0), &idx);
                            let cg = cond.select(ndarray::Axis(0), &idx);
                            let v = relit_nn::denoise(&model, &store, &zg, t as f64, &cg, &tokens)
                                .unwrap();
                            for (r, &i) in idx.iter().enumerate() {
                                v_all
                                    .index_axis_mut(ndarray::Axis(0), i)
                                    .assign(&v.index_axis(ndarray::Axis(0), r));
                            }
                        }
                        let mut srng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
                        z = relit_core::diffusion::sampler_step(
                            &z,
                            &v_all,
                            t,
                            t_next,
                            &schedule,
                            relit_core::diffusion::SamplerMode::Ddim,
                            &mut srng,
                        )
                        .unwrap();
                    }
                    eval_z(&z, &format!("partial DDIM from t={t_start}"));
                }
            }

            // Clamped-x0 DDIM loop (inline prototype), object 0, held-out env.
            {
                use relit_core::diffusion::inference_timesteps;
                let env_id = cfg.held_out_env();
                let env = ds.env(env_id).unwrap();
                let views = source_views(&ds, 0, cfg.src_env, res).unwrap();
                let flags = tc.flags();
                let cond =
                    relit_pipeline::conditioning_for_views(&views, flags).unwrap();
                let tokens =
                    relit_nn::lighting_tokens::<f32>(&env, cfg.lighting_grid, false).unwrap();
                for &(gs, steps) in &[(1.0f32, 12usize), (1.0, 25), (1.5, 25), (2.0, 25)] {
                    let ts = inference_timesteps(cfg.t_max, steps).unwrap();
                    let n = views.len();
                    let mut z = ndarray::Array4::<f32>::zeros((n, 3, res, res));
                    let mut zrng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
                    for v in z.iter_mut() {
                        *v = rand::Rng::sample(&mut zrng, rand_distr::StandardNormal);
                    }
                    let null = tokens.to_null();
                    for w in ts.windows(2) {
                        let (t, t_next) = (w[0], w[1]);
                        let mut v_all = ndarray::Array4::<f32>::zeros(z.raw_dim());
                        for g0 in (0..n).step_by(4) {
                            let idx: Vec<usize> = (g0..(g0 + 4).min(n)).collect();
                            let zg = z.select(ndarray::Axis(0), &idx);
                            let cg = cond.select(ndarray::Axis(0), &idx);
                            let vc = relit_nn::denoise(&model, &store, &zg, t as f64, &cg, &tokens).unwrap();
                            let v = if (gs - 1.0).abs() < 1e-9 {
                                vc
                            } else {
                                let vu = relit_nn::denoise(&model, &store, &zg, t as f64, &cg, &null).unwrap();
                                relit_core::diffusion::cfg_combine(&vc, &vu, gs).unwrap()
                            };
                            for (r, &i) in idx.iter().enumerate() {
                                v_all
                                    .index_axis_mut(ndarray::Axis(0), i)
                                    .assign(&v.index_axis(ndarray::Axis(0), r));
                            }
                        }
                        // Clamp implied x0 to the model-space range, recompose v.
                        let a = schedule.alpha_at(t).unwrap() as f32;
                        let s = schedule.sigma_at(t).unwrap() as f32;
                        let x0 = z.mapv(|zz| zz * a) - &v_all.mapv(|vv| vv * s);
                        let eps = z.mapv(|zz| zz * s) + &v_all.mapv(|vv| vv * a);
                        let x0c = x0.mapv(|x| x.clamp(-1.0, 1.0));
                        let v_eff = eps.mapv(|e| e * a) - &x0c.mapv(|x| x * s);
                        let mut srng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
                        let zn = relit_core::diffusion::sampler_step(
                            &z,
                            &v_eff,
                            t,
                            t_next,
                            &schedule,
                            relit_core::diffusion::SamplerMode::Ddim,
                            &mut srng,
                        )
                        .unwrap();
                        z = zn;
                    }
                    let decoded: Vec<ndarray::Array3<f32>> =
                        relit_nn::decode_views(&relit_core::codec::Codec::Pixel, &z)
                            .iter()
                            .map(relit_pipeline::model_to_image)
                            .collect();
                    let mut eval_views = Vec::new();
                    for (v, pred) in decoded.into_iter().enumerate() {
                        let gt = ds.radiance(0, env_id, v).unwrap();
                        let gt = if gt.dim().0 == res {
                            gt
                        } else {
                            relit_core::resample::resize_area(&gt, res, res)
                        };
                        let mask = mask_from_orm(&views[v].i_orm);
                        let pred = pred.mapv(|x| relit_core::math::tonemap(x as f64) as f32);
                        let gt = gt.mapv(|x| relit_core::math::tonemap(x as f64) as f32);
                        eval_views.push(EvalView { pred, gt, mask });
                    }
                    let obj = ObjectEval { object_id: "o0".into(), views: eval_views };
                    let rep = evaluate(std::slice::from_ref(&obj), RescaleMode::Slr).unwrap();
                    let rep_i = evaluate(std::slice::from_ref(&obj), RescaleMode::Ilr).unwrap();
                    println!(
                        "clamped gs {gs} steps {steps}: SLR {:.2} dB, ILR {:.2} dB",
                        rep.dataset_mean_psnr, rep_i.dataset_mean_psnr,
                    );
                }
            }

            // Guidance/steps sweep: relight object 0 under the held-out env.
            let env_id = cfg.held_out_env();
            let env = ds.env(env_id).unwrap();
            let views = source_views(&ds, 0, cfg.src_env, res).unwrap();
            for &(gs, steps) in
                &[(2.0f32, 12usize), (1.0, 12), (1.0, 50), (1.5, 50), (2.0, 50)]
            {
                let rc = RelightConfig {
                    steps,
                    group_size: cfg.k,
                    guidance_scale: gs,
                    workers: 1,
                    seed: 5,
                    sampler: relit_core::diffusion::SamplerMode::Ddim,
                    lighting_grid: cfg.lighting_grid,
                    flags: tc.flags(),
                };
                let preds =
                    relight(&model, &store, &schedule, &views, &env, &rc).unwrap();
                let mut eval_views = Vec::new();
                let mut sat_in_mask = 0usize;
                let mut mask_px = 0usize;
                for (v, pred) in preds.into_iter().enumerate() {
                    let gt = ds.radiance(0, env_id, v).unwrap();
                    let gt = if gt.dim().0 == res { gt } else {
                        relit_core::resample::resize_area(&gt, res, res)
                    };
                    let mask = mask_from_orm(&views[v].i_orm);
                    for ((y, x), &m) in mask.indexed_iter() {
                        if m > 0.0 {
                            mask_px += 3;
                            for c in 0..3 {
                                if pred[[y, x, c]] > 50.0 {
                                    sat_in_mask += 1;
                                }
                            }
                        }
                    }
                    let tmp = pred.mapv(|x| relit_core::math::tonemap(x as f64) as f32);
                    let tmg = gt.mapv(|x| relit_core::math::tonemap(x as f64) as f32);
                    eval_views.push(EvalView { pred: tmp, gt: tmg, mask });
                }
                let obj = ObjectEval { object_id: "o0".into(), views: eval_views };
                let rep = evaluate(std::slice::from_ref(&obj), RescaleMode::Slr).unwrap();
                let rep_i = evaluate(std::slice::from_ref(&obj), RescaleMode::Ilr).unwrap();
                println!(
                    "gs {gs} steps {steps}: SLR {:.2} dB, ILR {:.2} dB, sat {:.3}%",
                    rep.dataset_mean_psnr,
                    rep_i.dataset_mean_psnr,
                    100.0 * sat_in_mask as f64 / mask_px as f64,
                );
            }
        }
        "single" => {
            bench(Stage::Single, 1, 16, 20, false);
        }
        "multi" => {
            bench(Stage::Multi, 4, 16, 10, true);
        }
        "upscale" => {
            bench(Stage::Upscale, 4, 32, 6, true);
        }
        "upscale64" => {
            bench(Stage::Upscale, 4, 64, 3, true);
        }
        _ => {
            let s = bench(Stage::Single, 1, 16, 20, false);
            let m = bench(Stage::Multi, 4, 16, 10, true);
            let u = bench(Stage::Upscale, 4, 32, 6, true);
            println!("per staged run (900/500/260): {:.1} s", 900.0 * s + 500.0 * m + 260.0 * u);
        }
    }
    let _ = Variant::Full;
}
