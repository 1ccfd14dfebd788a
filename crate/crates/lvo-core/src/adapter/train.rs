//! Seeded training for the toy stack. A recipe fully determines the
//! resulting checkpoint: dataset, parameter init, and batch order all
//! come from derived streams.

use std::path::Path;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::checkpoint::{
    save_checkpoint, CheckpointManifest, ConditioningInfo, DenoiserInfo, ModelLossInfo, SaeInfo,
    SchedulerInfo, VaeInfo, FORMAT_TAG,
};
use crate::adapter::dataset::{ShapesDataset, ShapesDatasetConfig, CLASS_NAMES};
use crate::adapter::toy::{HookSpec, ToyArch, ToyDenoiser, ToyVae, LAYERS, LAYER_MID_ATTN};
use crate::error::{LvoError, Result};
use crate::rng::derive_rng;
use crate::sae::{topk_mask, SparseAutoencoder};
use crate::schedule::{
    build_scheduler, draw_noise, inject_schedule_noise_with, ScheduleKind, SchedulerTable,
    BETA_END, BETA_START,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub dataset: ShapesDatasetConfig,
    pub t_total: usize,
    pub seed: u64,
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    pub denoiser_steps: usize,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
    pub sae_steps: usize,
    pub sae_lr: f64,
    pub sae_batch: usize,
    pub sae_dict_size: usize,
    pub sae_k: usize,
    pub sae_t_stride: usize,
    pub recon_mae_bound: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            dataset: ShapesDatasetConfig::default(),
            t_total: 100,
            seed: 7,
            vae_steps: 1500,
            vae_lr: 1e-3,
            vae_batch: 32,
            denoiser_steps: 4000,
            denoiser_lr: 1e-3,
            denoiser_batch: 32,
            sae_steps: 2000,
            sae_lr: 1e-3,
            sae_batch: 256,
            sae_dict_size: 64,
            sae_k: 8,
            sae_t_stride: 10,
            recon_mae_bound: 0.06,
        }
    }
}

impl TrainRecipe {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("dataset.n", self.dataset.n),
            ("t_total", self.t_total),
            ("vae_steps", self.vae_steps),
            ("vae_batch", self.vae_batch),
            ("denoiser_steps", self.denoiser_steps),
            ("denoiser_batch", self.denoiser_batch),
            ("sae_steps", self.sae_steps),
            ("sae_batch", self.sae_batch),
            ("sae_dict_size", self.sae_dict_size),
            ("sae_k", self.sae_k),
            ("sae_t_stride", self.sae_t_stride),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(LvoError::Config(format!("{name} must be positive")));
            }
        }
        if self.sae_k > self.sae_dict_size {
            return Err(LvoError::Config(format!(
                "sae_k {} exceeds sae_dict_size {}",
                self.sae_k, self.sae_dict_size
            )));
        }
        Ok(())
    }
}

pub struct TrainedBundle {
    pub manifest: CheckpointManifest,
    pub vae: ToyVae,
    pub denoiser: ToyDenoiser,
    pub sae: SparseAutoencoder,
}

/// Trains VAE, denoiser, and SAE in sequence and assembles the manifest.
pub fn train_toy(
    recipe: &TrainRecipe,
    device: &Device,
    log: &mut dyn FnMut(&str),
) -> Result<TrainedBundle> {
    recipe.validate()?;
    let arch = ToyArch::default();
    let dataset = ShapesDataset::generate(&recipe.dataset);
    let schedule = build_scheduler(recipe.t_total, ScheduleKind::Linear)?;

    log(&format!(
        "training on {} images, {} timesteps",
        dataset.len(),
        recipe.t_total
    ));
    let (mut vae, vae_loss) = train_vae(&dataset, arch, recipe, device, log)?;

    let stats = latent_stats(&vae, &dataset)?;
    vae.set_latent_stats(stats.0.clone(), stats.1.clone())?;
    let recon_mae = dataset_recon_mae(&vae, &dataset)?;
    log(&format!("vae recon mae {recon_mae:.5}"));

    let classes: Vec<usize> = dataset.samples.iter().map(|s| s.class_id).collect();
    let images: Vec<&Array3<f64>> = dataset.samples.iter().map(|s| &s.image).collect();
    let latents = vae.encode_batch(&images)?;

    let (denoiser, denoiser_loss) =
        train_denoiser(&latents, &classes, arch, &schedule, recipe, device, log)?;

    let corpus = sae_corpus(&latents, &classes, &denoiser, &schedule, recipe)?;
    log(&format!("sae corpus of {} token vectors", corpus.nrows()));
    let (sae, sae_loss) = train_sae(&corpus, recipe, device, log)?;

    let (ic, ih, iw) = arch.image_shape();
    let (lc, lh, lw) = arch.latent_shape();
    let manifest = CheckpointManifest {
        format: FORMAT_TAG.to_string(),
        arch,
        conditioning: ConditioningInfo {
            kind: "class_label".to_string(),
            num_classes: arch.num_classes,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        },
        image_shape: vec![ic, ih, iw],
        latent_shape: vec![lc, lh, lw],
        layers: LAYERS
            .iter()
            .map(|&l| (l.to_string(), arch.layer_width(l).expect("known layer")))
            .collect(),
        default_layer: LAYER_MID_ATTN.to_string(),
        scheduler: SchedulerInfo {
            kind: ScheduleKind::Linear,
            t_total: recipe.t_total,
            beta_start: BETA_START,
            beta_end: BETA_END,
        },
        dataset: recipe.dataset,
        vae: VaeInfo {
            file: "vae.safetensors".to_string(),
            latent_mean: stats.0.to_vec(),
            latent_std: stats.1.to_vec(),
            recon_mae,
            recon_mae_bound: recipe.recon_mae_bound,
            loss: vae_loss,
        },
        denoiser: DenoiserInfo {
            file: "denoiser.safetensors".to_string(),
            loss: denoiser_loss,
        },
        sae: Some(SaeInfo {
            file: "sae.safetensors".to_string(),
            layer: LAYER_MID_ATTN.to_string(),
            input_dim: arch.mid_width,
            dict_size: recipe.sae_dict_size,
            k: recipe.sae_k,
            loss: sae_loss,
        }),
    };
    if recon_mae > recipe.recon_mae_bound {
        return Err(LvoError::Checkpoint(format!(
            "trained VAE recon mae {recon_mae:.5} exceeds the bound {}; adjust the recipe",
            recipe.recon_mae_bound
        )));
    }
    Ok(TrainedBundle {
        manifest,
        vae,
        denoiser,
        sae,
    })
}

pub fn train_and_save(
    recipe: &TrainRecipe,
    dir: &Path,
    device: &Device,
    log: &mut dyn FnMut(&str),
) -> Result<CheckpointManifest> {
    let bundle = train_toy(recipe, device, log)?;
    save_checkpoint(
        dir,
        &bundle.manifest,
        &bundle.vae,
        &bundle.denoiser,
        Some(&bundle.sae),
    )?;
    log(&format!("checkpoint written to {}", dir.display()));
    Ok(bundle.manifest)
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn images_tensor(dataset: &ShapesDataset, idxs: &[usize], device: &Device) -> Result<Tensor> {
    let (c, h, w) = crate::adapter::dataset::IMAGE_SHAPE;
    let mut data = Vec::with_capacity(idxs.len() * c * h * w);
    for &i in idxs {
        data.extend(dataset.samples[i].image.iter().copied());
    }
    Ok(Tensor::from_vec(data, (idxs.len(), c, h, w), device)?)
}

fn vae_eval_loss(vae: &ToyVae, eval: &Tensor) -> Result<f64> {
    let recon = vae.decode_raw(&vae.encode_raw(eval)?)?;
    mse(&recon, eval)?.to_scalar::<f64>().map_err(Into::into)
}

fn train_vae(
    dataset: &ShapesDataset,
    arch: ToyArch,
    recipe: &TrainRecipe,
    device: &Device,
    log: &mut dyn FnMut(&str),
) -> Result<(ToyVae, ModelLossInfo)> {
    let vae = ToyVae::new(arch, recipe.seed, device)?;
    let mut opt = adam(vae.params.trainable(), recipe.vae_lr)?;
    let n = dataset.len();
    let eval_idxs: Vec<usize> = (0..n.min(32)).collect();
    let eval = images_tensor(dataset, &eval_idxs, device)?;
    let initial = vae_eval_loss(&vae, &eval)?;
    let mut rng = derive_rng(recipe.seed, &["train", "vae"]);
    for step in 0..recipe.vae_steps {
        let idxs: Vec<usize> = (0..recipe.vae_batch.min(n))
            .map(|_| rng.random_range(0..n))
            .collect();
        let x = images_tensor(dataset, &idxs, device)?;
        let recon = vae.decode_raw(&vae.encode_raw(&x)?)?;
        let loss = mse(&recon, &x)?;
        opt.step(&loss.backward()?)?;
        if step % 200 == 0 {
            log(&format!("vae step {step} loss {:.6}", loss.to_scalar::<f64>()?));
        }
    }
    let last = vae_eval_loss(&vae, &eval)?;
    log(&format!("vae loss {initial:.6} -> {last:.6}"));
    Ok((vae, ModelLossInfo { initial, last }))
}

/// Per-channel mean and std of raw encoder outputs over the dataset.
fn latent_stats(vae: &ToyVae, dataset: &ShapesDataset) -> Result<(Array1<f64>, Array1<f64>)> {
    let images: Vec<&Array3<f64>> = dataset.samples.iter().map(|s| &s.image).collect();
    // Stats are taken before standardization is configured, so encode_batch
    // returns raw encoder outputs here.
    let latents = vae.encode_batch(&images)?;
    let channels = latents[0].dim().0;
    let mut mean: Array1<f64> = Array1::zeros(channels);
    let mut var: Array1<f64> = Array1::zeros(channels);
    let per_channel = latents[0].len() / channels;
    let count = (latents.len() * per_channel) as f64;
    for z in &latents {
        for (c, plane) in z.outer_iter().enumerate() {
            mean[c] += plane.sum();
        }
    }
    mean.mapv_inplace(|v| v / count);
    for z in &latents {
        for (c, plane) in z.outer_iter().enumerate() {
            var[c] += plane.iter().map(|&v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = var.mapv(|v| (v / count).sqrt().max(1e-6));
    Ok((mean, std))
}

fn dataset_recon_mae(vae: &ToyVae, dataset: &ShapesDataset) -> Result<f64> {
    let device = Device::Cpu;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(64) {
        let x = images_tensor(dataset, chunk, &device)?;
        let recon = vae.decode_raw(&vae.encode_raw(&x)?)?;
        let diff = (recon - &x)?.abs()?;
        total += diff.sum_all()?.to_scalar::<f64>()?;
        count += x.elem_count();
    }
    Ok(total / count as f64)
}

fn latents_tensor(latents: &[Array3<f64>], device: &Device) -> Result<Tensor> {
    let (c, h, w) = latents[0].dim();
    let mut data = Vec::with_capacity(latents.len() * c * h * w);
    for z in latents {
        data.extend(z.iter().copied());
    }
    Ok(Tensor::from_vec(data, (latents.len(), c, h, w), device)?)
}

struct DenoiserProbe {
    zt: Tensor,
    target: Tensor,
    ts: Vec<usize>,
    ids: Vec<usize>,
}

fn denoiser_eval_loss(denoiser: &ToyDenoiser, probe: &DenoiserProbe) -> Result<f64> {
    let (pred, _) = denoiser.forward_inner(&probe.zt, &probe.ts, &probe.ids, HookSpec::None)?;
    mse(&pred, &probe.target)?.to_scalar::<f64>().map_err(Into::into)
}

fn train_denoiser(
    latents: &[Array3<f64>],
    classes: &[usize],
    arch: ToyArch,
    schedule: &SchedulerTable,
    recipe: &TrainRecipe,
    device: &Device,
    log: &mut dyn FnMut(&str),
) -> Result<(ToyDenoiser, ModelLossInfo)> {
    let denoiser = ToyDenoiser::new(arch, recipe.seed, device)?;
    let mut opt = adam(denoiser.params.trainable(), recipe.denoiser_lr)?;
    let n = latents.len();
    let t_total = schedule.len();
    let shape = arch.latent_shape();

    // Fixed probe batch: timesteps spread over the schedule, noise from a
    // dedicated stream, so initial and final losses are comparable.
    let probe = {
        let mut rng = derive_rng(recipe.seed, &["train", "denoiser", "eval"]);
        let m = n.min(32);
        let mut zts = Vec::with_capacity(m);
        let mut eps_all = Vec::with_capacity(m);
        let mut ts = Vec::with_capacity(m);
        let mut ids = Vec::with_capacity(m);
        for i in 0..m {
            let t = i * t_total / m;
            let eps = draw_noise(shape, &mut rng);
            zts.push(inject_schedule_noise_with(&latents[i], t, schedule, &eps)?);
            eps_all.push(eps);
            ts.push(t);
            ids.push(classes[i]);
        }
        DenoiserProbe {
            zt: latents_tensor(&zts, device)?,
            target: latents_tensor(&eps_all, device)?,
            ts,
            ids,
        }
    };
    let initial = denoiser_eval_loss(&denoiser, &probe)?;

    let mut rng = derive_rng(recipe.seed, &["train", "denoiser"]);
    for step in 0..recipe.denoiser_steps {
        let batch = recipe.denoiser_batch.min(n);
        let mut zts = Vec::with_capacity(batch);
        let mut eps_all = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        let mut ids = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..n);
            let t = rng.random_range(0..t_total);
            let eps = draw_noise(shape, &mut rng);
            zts.push(inject_schedule_noise_with(&latents[i], t, schedule, &eps)?);
            eps_all.push(eps);
            ts.push(t);
            ids.push(classes[i]);
        }
        let zt = latents_tensor(&zts, device)?;
        let target = latents_tensor(&eps_all, device)?;
        let (pred, _) = denoiser.forward_inner(&zt, &ts, &ids, HookSpec::None)?;
        let loss = mse(&pred, &target)?;
        opt.step(&loss.backward()?)?;
        if step % 500 == 0 {
            log(&format!(
                "denoiser step {step} loss {:.6}",
                loss.to_scalar::<f64>()?
            ));
        }
    }
    let last = denoiser_eval_loss(&denoiser, &probe)?;
    log(&format!("denoiser loss {initial:.6} -> {last:.6}"));
    Ok((denoiser, ModelLossInfo { initial, last }))
}

/// Token activations at the dictionary layer over noised latents, taken
/// at a stride through the schedule.
fn sae_corpus(
    latents: &[Array3<f64>],
    classes: &[usize],
    denoiser: &ToyDenoiser,
    schedule: &SchedulerTable,
    recipe: &TrainRecipe,
) -> Result<Array2<f64>> {
    let shape = latents[0].dim();
    let mut rng = derive_rng(recipe.seed, &["train", "sae", "corpus"]);
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    for t in (0..schedule.len()).step_by(recipe.sae_t_stride) {
        let mut noisy = Vec::with_capacity(latents.len());
        for z in latents {
            let eps = draw_noise(shape, &mut rng);
            noisy.push(inject_schedule_noise_with(z, t, schedule, &eps)?);
        }
        let ts = vec![t; latents.len()];
        let maps = denoiser.capture_batch(&noisy, &ts, classes, LAYER_MID_ATTN)?;
        for map in maps {
            width = map.ncols();
            rows.extend(map.iter().copied());
        }
    }
    let count = rows.len() / width;
    Array2::from_shape_vec((count, width), rows).map_err(|e| LvoError::Shape {
        expected: format!("{count}x{width} corpus"),
        got: e.to_string(),
    })
}

struct SaeVars {
    w_enc: Var,
    b_enc: Var,
    w_dec: Var,
    b_dec: Var,
}

fn sae_loss(vars: &SaeVars, x: &Tensor, k: usize) -> Result<Tensor> {
    let pre = x
        .broadcast_sub(vars.b_dec.as_tensor())?
        .matmul(&vars.w_enc.as_tensor().t()?)?
        .broadcast_add(vars.b_enc.as_tensor())?;
    let (bsz, m) = pre.dims2()?;
    let host = pre.detach().flatten_all()?.to_vec1::<f64>()?;
    let host = Array2::from_shape_vec((bsz, m), host).expect("sized above");
    let mut mask = vec![0.0f64; bsz * m];
    for (i, row) in host.rows().into_iter().enumerate() {
        for (j, keep) in topk_mask(row, k).into_iter().enumerate() {
            if keep {
                mask[i * m + j] = 1.0;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (bsz, m), x.device())?;
    let acts = (pre * mask)?.relu()?;
    let recon = acts
        .matmul(vars.w_dec.as_tensor())?
        .broadcast_add(vars.b_dec.as_tensor())?;
    mse(&recon, x)
}

fn rows_tensor(corpus: &Array2<f64>, idxs: &[usize], device: &Device) -> Result<Tensor> {
    let d = corpus.ncols();
    let mut data = Vec::with_capacity(idxs.len() * d);
    for &i in idxs {
        data.extend(corpus.row(i).iter().copied());
    }
    Ok(Tensor::from_vec(data, (idxs.len(), d), device)?)
}

fn train_sae(
    corpus: &Array2<f64>,
    recipe: &TrainRecipe,
    device: &Device,
    log: &mut dyn FnMut(&str),
) -> Result<(SparseAutoencoder, ModelLossInfo)> {
    let (rows, d) = corpus.dim();
    let m = recipe.sae_dict_size;
    let k = recipe.sae_k;
    let mut rng = derive_rng(recipe.seed, &["train", "sae"]);

    let col_mean: Vec<f64> = (0..d).map(|j| corpus.column(j).mean().unwrap_or(0.0)).collect();
    let enc_std = 1.0 / (d as f64).sqrt();
    let w_enc_init: Vec<f64> = (0..m * d)
        .map(|_| enc_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut w_dec_init: Vec<f64> = (0..m * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    for row in w_dec_init.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let vars = SaeVars {
        w_enc: Var::from_tensor(&Tensor::from_vec(w_enc_init, (m, d), device)?)?,
        b_enc: Var::from_tensor(&Tensor::zeros((m,), candle_core::DType::F64, device)?)?,
        w_dec: Var::from_tensor(&Tensor::from_vec(w_dec_init, (m, d), device)?)?,
        b_dec: Var::from_tensor(&Tensor::from_vec(col_mean, (d,), device)?)?,
    };
    let mut opt = adam(
        vec![
            vars.w_enc.clone(),
            vars.b_enc.clone(),
            vars.w_dec.clone(),
            vars.b_dec.clone(),
        ],
        recipe.sae_lr,
    )?;

    let eval_idxs: Vec<usize> = (0..rows.min(1024)).collect();
    let eval = rows_tensor(corpus, &eval_idxs, device)?;
    let initial = sae_loss(&vars, &eval, k)?.to_scalar::<f64>()?;

    for step in 0..recipe.sae_steps {
        let idxs: Vec<usize> = (0..recipe.sae_batch.min(rows))
            .map(|_| rng.random_range(0..rows))
            .collect();
        let x = rows_tensor(corpus, &idxs, device)?;
        let loss = sae_loss(&vars, &x, k)?;
        opt.step(&loss.backward()?)?;
        // Dictionary rows live on the unit sphere; renormalize after
        // every optimizer update.
        let t = vars.w_dec.as_tensor().clone();
        let norms = t
            .sqr()?
            .sum_keepdim(1)?
            .sqrt()?
            .clamp(1e-12, f64::INFINITY)?;
        vars.w_dec.set(&t.broadcast_div(&norms)?)?;
        if step % 500 == 0 {
            log(&format!("sae step {step} loss {:.6}", loss.to_scalar::<f64>()?));
        }
    }
    let last = sae_loss(&vars, &eval, k)?.to_scalar::<f64>()?;
    log(&format!("sae loss {initial:.6} -> {last:.6}"));

    let to_array2 = |v: &Var| -> Result<Array2<f64>> {
        let data = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        Array2::from_shape_vec((m, d), data).map_err(|e| LvoError::Shape {
            expected: format!("{m}x{d}"),
            got: e.to_string(),
        })
    };
    let to_array1 = |v: &Var| -> Result<Array1<f64>> {
        Ok(Array1::from_vec(v.as_tensor().flatten_all()?.to_vec1::<f64>()?))
    };
    let sae = SparseAutoencoder::new(
        to_array2(&vars.w_enc)?,
        to_array1(&vars.b_enc)?,
        to_array2(&vars.w_dec)?,
        to_array1(&vars.b_dec)?,
        k,
    )?;
    Ok((sae, ModelLossInfo { initial, last }))
}
