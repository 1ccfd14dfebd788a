//! Toy latent diffusion stack backing the bundled checkpoint: a small
//! convolutional VAE plus a class-conditioned denoiser with one
//! self-attention block, both in f64 on CPU so gradients are exact
//! enough for finite-difference checks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::ops::{sigmoid, softmax};
use candle_nn::{
    Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Embedding, Linear, Module,
};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    ActivationEdit, ActivationReadout, Aggregation, DenoiserModel, HookedForward, VaeCodec,
};
use crate::error::{LvoError, Result};
use crate::rng::derive_rng;
use crate::sae::topk_mask;

pub const LAYER_CONV_IN: &str = "conv_in";
pub const LAYER_DOWN: &str = "down";
pub const LAYER_MID_ATTN: &str = "mid_attn";
pub const LAYER_UP: &str = "up";

pub const LAYERS: [&str; 4] = [LAYER_CONV_IN, LAYER_DOWN, LAYER_MID_ATTN, LAYER_UP];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyArch {
    pub image_channels: usize,
    pub image_size: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub vae_width: usize,
    pub base_width: usize,
    pub mid_width: usize,
    pub time_dim: usize,
    pub num_classes: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            latent_channels: 4,
            latent_size: 8,
            vae_width: 16,
            base_width: 32,
            mid_width: 48,
            time_dim: 32,
            num_classes: 3,
        }
    }
}

impl ToyArch {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.image_channels, self.image_size, self.image_size)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.latent_size, self.latent_size)
    }

    /// Token count at the attention block, after one stride-2 stage.
    pub fn mid_tokens(&self) -> usize {
        let side = self.latent_size / 2;
        side * side
    }

    pub fn layer_width(&self, layer: &str) -> Option<usize> {
        match layer {
            LAYER_CONV_IN | LAYER_UP => Some(self.base_width),
            LAYER_DOWN | LAYER_MID_ATTN => Some(self.mid_width),
            _ => None,
        }
    }
}

enum ParamSource {
    Seeded(ChaCha12Rng),
    Loaded(HashMap<String, Tensor>),
}

/// Creates and registers model parameters, either freshly drawn from a
/// seeded stream or restored from a safetensors file. Modules share the
/// Var storage, so optimizer updates are visible through them.
pub(crate) struct ParamBuilder {
    source: ParamSource,
    registry: BTreeMap<String, Var>,
    device: Device,
}

impl ParamBuilder {
    fn seeded(seed: u64, label: &str, device: &Device) -> ParamBuilder {
        ParamBuilder {
            source: ParamSource::Seeded(derive_rng(seed, &["init", label])),
            registry: BTreeMap::new(),
            device: device.clone(),
        }
    }

    fn loaded(path: &Path, device: &Device) -> Result<ParamBuilder> {
        let tensors = candle_core::safetensors::load(path, device)?;
        Ok(ParamBuilder {
            source: ParamSource::Loaded(tensors),
            registry: BTreeMap::new(),
            device: device.clone(),
        })
    }

    fn var(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let tensor = match &mut self.source {
            ParamSource::Seeded(rng) => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if std == 0.0 {
                    vec![0.0; n]
                } else {
                    (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                Tensor::from_vec(data, shape, &self.device)?
            }
            ParamSource::Loaded(tensors) => {
                let tensor = tensors.remove(name).ok_or_else(|| {
                    LvoError::Checkpoint(format!("missing tensor {name:?}"))
                })?;
                if tensor.dims() != shape {
                    return Err(LvoError::shape(
                        format!("{shape:?} for tensor {name:?}"),
                        format!("{:?}", tensor.dims()),
                    ));
                }
                tensor.to_dtype(DType::F64)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        self.registry.insert(name.to_string(), var.clone());
        Ok(var)
    }

    fn assert_consumed(&self) -> Result<()> {
        if let ParamSource::Loaded(tensors) = &self.source {
            if !tensors.is_empty() {
                let mut names: Vec<&String> = tensors.keys().collect();
                names.sort();
                return Err(LvoError::Checkpoint(format!(
                    "unexpected tensors in checkpoint: {names:?}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn trainable(&self) -> Vec<Var> {
        self.registry.values().cloned().collect()
    }

    pub(crate) fn get(&self, name: &str) -> Option<&Var> {
        self.registry.get(name)
    }

    pub(crate) fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .registry
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }
}

fn conv2d(
    pb: &mut ParamBuilder,
    name: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
) -> Result<Conv2d> {
    let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
    let weight = pb.var(&format!("{name}.weight"), &[c_out, c_in, 3, 3], std)?;
    let bias = pb.var(&format!("{name}.bias"), &[c_out], 0.0)?;
    let config = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(
        weight.as_tensor().clone(),
        Some(bias.as_tensor().clone()),
        config,
    ))
}

fn conv_transpose2d(
    pb: &mut ParamBuilder,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<ConvTranspose2d> {
    let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
    // Transposed conv kernels are laid out (c_in, c_out, kh, kw).
    let weight = pb.var(&format!("{name}.weight"), &[c_in, c_out, 3, 3], std)?;
    let bias = pb.var(&format!("{name}.bias"), &[c_out], 0.0)?;
    let config = ConvTranspose2dConfig {
        padding: 1,
        output_padding: 1,
        stride: 2,
        dilation: 1,
    };
    Ok(ConvTranspose2d::new(
        weight.as_tensor().clone(),
        Some(bias.as_tensor().clone()),
        config,
    ))
}

fn linear(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
    let std = (1.0 / d_in as f64).sqrt();
    let weight = pb.var(&format!("{name}.weight"), &[d_out, d_in], std)?;
    let bias = pb.var(&format!("{name}.bias"), &[d_out], 0.0)?;
    Ok(Linear::new(
        weight.as_tensor().clone(),
        Some(bias.as_tensor().clone()),
    ))
}

pub(crate) fn array3_to_tensor(a: &Array3<f64>, device: &Device) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), device)?)
}

pub(crate) fn tensor_to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let dims = t.dims();
    let (c, h, w) = match dims {
        [1, c, h, w] => (*c, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(LvoError::shape("a rank-3 map", format!("{other:?}")));
        }
    };
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| LvoError::Shape {
            expected: format!("{c}x{h}x{w}"),
            got: e.to_string(),
        })
}

fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (rows, cols) = t.dims2()?;
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| LvoError::Shape {
        expected: format!("{rows}x{cols}"),
        got: e.to_string(),
    })
}

/// Sinusoidal position features of the raw timestep index.
pub(crate) fn time_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10000.0f64).ln() / half as f64).exp();
            let angle = t as f64 * freq;
            out[[i, j]] = angle.sin();
            out[[i, half + j]] = angle.cos();
        }
    }
    out
}

pub struct ToyVae {
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
    latent_mean: Array1<f64>,
    latent_std: Array1<f64>,
    arch: ToyArch,
    device: Device,
    pub(crate) params: ParamBuilder,
}

impl ToyVae {
    pub fn new(arch: ToyArch, seed: u64, device: &Device) -> Result<ToyVae> {
        let pb = ParamBuilder::seeded(seed, "vae", device);
        ToyVae::build(arch, pb, device)
    }

    pub fn from_file(
        arch: ToyArch,
        path: &Path,
        latent_mean: Array1<f64>,
        latent_std: Array1<f64>,
        device: &Device,
    ) -> Result<ToyVae> {
        let pb = ParamBuilder::loaded(path, device)?;
        let mut vae = ToyVae::build(arch, pb, device)?;
        vae.params.assert_consumed()?;
        vae.set_latent_stats(latent_mean, latent_std)?;
        Ok(vae)
    }

    fn build(arch: ToyArch, mut pb: ParamBuilder, device: &Device) -> Result<ToyVae> {
        let w = arch.vae_width;
        let enc1 = conv2d(&mut pb, "enc1", arch.image_channels, w, 2)?;
        let enc2 = conv2d(&mut pb, "enc2", w, arch.latent_channels, 2)?;
        let dec1 = conv2d(&mut pb, "dec1", arch.latent_channels, w, 1)?;
        let dec2 = conv2d(&mut pb, "dec2", w, w, 1)?;
        let dec3 = conv2d(&mut pb, "dec3", w, arch.image_channels, 1)?;
        Ok(ToyVae {
            enc1,
            enc2,
            dec1,
            dec2,
            dec3,
            latent_mean: Array1::zeros(arch.latent_channels),
            latent_std: Array1::ones(arch.latent_channels),
            arch,
            device: device.clone(),
            params: pb,
        })
    }

    /// Per-channel statistics that standardize encoder outputs.
    pub fn set_latent_stats(&mut self, mean: Array1<f64>, std: Array1<f64>) -> Result<()> {
        let c = self.arch.latent_channels;
        if mean.len() != c || std.len() != c {
            return Err(LvoError::shape(
                format!("{c} latent channel stats"),
                format!("{} and {}", mean.len(), std.len()),
            ));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(LvoError::Config("latent std must be finite and positive".into()));
        }
        self.latent_mean = mean;
        self.latent_std = std;
        Ok(())
    }

    pub fn latent_stats(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.latent_mean, &self.latent_std)
    }

    pub(crate) fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.enc1.forward(x)?.silu()?;
        Ok(self.enc2.forward(&h)?)
    }

    pub(crate) fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mid = self.arch.latent_size * 2;
        let full = self.arch.image_size;
        let h = self.dec1.forward(z)?.silu()?.upsample_nearest2d(mid, mid)?;
        let h = self.dec2.forward(&h)?.silu()?.upsample_nearest2d(full, full)?;
        Ok(sigmoid(&self.dec3.forward(&h)?)?)
    }

    /// Encodes a batch of images to standardized latents.
    pub(crate) fn encode_batch(&self, images: &[&Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        let (c, h, w) = self.arch.image_shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for image in images {
            if image.dim() != (c, h, w) {
                return Err(LvoError::shape(
                    format!("image {c}x{h}x{w}"),
                    format!("{:?}", image.dim()),
                ));
            }
            data.extend(image.iter().copied());
        }
        let x = Tensor::from_vec(data, (images.len(), c, h, w), &self.device)?;
        let raw = self.encode_raw(&x)?;
        let (lc, lh, lw) = self.arch.latent_shape();
        let flat = raw.flatten_all()?.to_vec1::<f64>()?;
        let mut out = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let slice = &flat[i * lc * lh * lw..(i + 1) * lc * lh * lw];
            let mut z = Array3::from_shape_vec((lc, lh, lw), slice.to_vec()).expect("sized above");
            for (ch, mut plane) in z.outer_iter_mut().enumerate() {
                let (m, s) = (self.latent_mean[ch], self.latent_std[ch]);
                plane.mapv_inplace(|v| (v - m) / s);
            }
            out.push(z);
        }
        Ok(out)
    }
}

impl VaeCodec for ToyVae {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.arch.image_shape()
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.arch.latent_shape()
    }

    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.encode_batch(&[image])?.pop().expect("one image in"))
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        if latent.dim() != self.arch.latent_shape() {
            return Err(LvoError::shape(
                format!("latent {:?}", self.arch.latent_shape()),
                format!("{:?}", latent.dim()),
            ));
        }
        let mut raw = latent.clone();
        for (ch, mut plane) in raw.outer_iter_mut().enumerate() {
            let (m, s) = (self.latent_mean[ch], self.latent_std[ch]);
            plane.mapv_inplace(|v| v * s + m);
        }
        let z = array3_to_tensor(&raw, &self.device)?;
        tensor_to_array3(&self.decode_raw(&z)?)
    }
}

pub(crate) enum HookSpec<'a> {
    None,
    Capture { layer: &'a str },
    Edit { layer: &'a str, delta: &'a Tensor },
}

pub struct ToyDenoiser {
    conv_in: Conv2d,
    down: Conv2d,
    time1: Linear,
    time2: Linear,
    class_emb: Embedding,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_o: Linear,
    up: ConvTranspose2d,
    conv_out: Conv2d,
    arch: ToyArch,
    device: Device,
    pub(crate) params: ParamBuilder,
}

impl ToyDenoiser {
    pub fn new(arch: ToyArch, seed: u64, device: &Device) -> Result<ToyDenoiser> {
        let pb = ParamBuilder::seeded(seed, "denoiser", device);
        ToyDenoiser::build(arch, pb, device)
    }

    pub fn from_file(arch: ToyArch, path: &Path, device: &Device) -> Result<ToyDenoiser> {
        let pb = ParamBuilder::loaded(path, device)?;
        let denoiser = ToyDenoiser::build(arch, pb, device)?;
        denoiser.params.assert_consumed()?;
        Ok(denoiser)
    }

    fn build(arch: ToyArch, mut pb: ParamBuilder, device: &Device) -> Result<ToyDenoiser> {
        let conv_in = conv2d(&mut pb, "conv_in", arch.latent_channels, arch.base_width, 1)?;
        let down = conv2d(&mut pb, "down", arch.base_width, arch.mid_width, 2)?;
        let time1 = linear(&mut pb, "time1", arch.time_dim, arch.mid_width)?;
        let time2 = linear(&mut pb, "time2", arch.mid_width, arch.mid_width)?;
        let emb_weight = pb.var(
            "class_emb.weight",
            &[arch.num_classes, arch.mid_width],
            0.2,
        )?;
        let class_emb = Embedding::new(emb_weight.as_tensor().clone(), arch.mid_width);
        let attn_q = linear(&mut pb, "attn_q", arch.mid_width, arch.mid_width)?;
        let attn_k = linear(&mut pb, "attn_k", arch.mid_width, arch.mid_width)?;
        let attn_v = linear(&mut pb, "attn_v", arch.mid_width, arch.mid_width)?;
        let attn_o = linear(&mut pb, "attn_o", arch.mid_width, arch.mid_width)?;
        let up = conv_transpose2d(&mut pb, "up", arch.mid_width, arch.base_width)?;
        let conv_out = conv2d(&mut pb, "conv_out", arch.base_width, arch.latent_channels, 1)?;
        Ok(ToyDenoiser {
            conv_in,
            down,
            time1,
            time2,
            class_emb,
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            up,
            conv_out,
            arch,
            device: device.clone(),
            params: pb,
        })
    }

    pub fn arch(&self) -> &ToyArch {
        &self.arch
    }

    fn hook_conv(
        &self,
        h: Tensor,
        name: &str,
        hook: &HookSpec<'_>,
        captured: &mut Option<Tensor>,
        matched: &mut bool,
    ) -> Result<Tensor> {
        match hook {
            HookSpec::Capture { layer } if *layer == name => {
                *matched = true;
                let (b, c, hh, ww) = h.dims4()?;
                *captured = Some(h.reshape((b, c, hh * ww))?.transpose(1, 2)?);
                Ok(h)
            }
            HookSpec::Edit { layer, delta } if *layer == name => {
                *matched = true;
                let c = h.dim(1)?;
                Ok(h.broadcast_add(&delta.reshape((1, c, 1, 1))?)?)
            }
            _ => Ok(h),
        }
    }

    fn hook_tokens(
        &self,
        f: Tensor,
        name: &str,
        hook: &HookSpec<'_>,
        captured: &mut Option<Tensor>,
        matched: &mut bool,
    ) -> Result<Tensor> {
        match hook {
            HookSpec::Capture { layer } if *layer == name => {
                *matched = true;
                *captured = Some(f.clone());
                Ok(f)
            }
            HookSpec::Edit { layer, delta } if *layer == name => {
                *matched = true;
                let c = f.dim(2)?;
                Ok(f.broadcast_add(&delta.reshape((1, 1, c))?)?)
            }
            _ => Ok(f),
        }
    }

    /// Shared forward pass. Capture and edit run at the same tensor for a
    /// given layer, so an absent hook and a skipped edit take identical
    /// code paths.
    pub(crate) fn forward_inner(
        &self,
        z: &Tensor,
        ts: &[usize],
        class_ids: &[usize],
        hook: HookSpec<'_>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (b, c, height, width) = z.dims4()?;
        let (lc, lh, lw) = self.arch.latent_shape();
        if c != lc || height != lh || width != lw {
            return Err(LvoError::shape(
                format!("latent batch _x{lc}x{lh}x{lw}"),
                format!("{b}x{c}x{height}x{width}"),
            ));
        }
        if ts.len() != b || class_ids.len() != b {
            return Err(LvoError::shape(
                format!("{b} timesteps and class ids"),
                format!("{} and {}", ts.len(), class_ids.len()),
            ));
        }
        if let Some(&bad) = class_ids.iter().find(|&&id| id >= self.arch.num_classes) {
            return Err(LvoError::Config(format!(
                "class id {bad} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        let mut captured = None;
        let mut matched = matches!(hook, HookSpec::None);

        let h = self.conv_in.forward(z)?.silu()?;
        let h = self.hook_conv(h, LAYER_CONV_IN, &hook, &mut captured, &mut matched)?;
        let h = self.down.forward(&h)?.silu()?;
        let h = self.hook_conv(h, LAYER_DOWN, &hook, &mut captured, &mut matched)?;

        let temb_host = time_embedding(ts, self.arch.time_dim);
        let temb = Tensor::from_vec(
            temb_host.iter().copied().collect::<Vec<f64>>(),
            (b, self.arch.time_dim),
            &self.device,
        )?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let ids = Tensor::from_vec(
            class_ids.iter().map(|&i| i as u32).collect::<Vec<u32>>(),
            (b,),
            &self.device,
        )?;
        let cemb = self.class_emb.forward(&ids)?;
        let cond = (&temb + &cemb)?.reshape((b, self.arch.mid_width, 1, 1))?;
        let h = h.broadcast_add(&cond)?;

        let side = self.arch.latent_size / 2;
        let tokens = h
            .reshape((b, self.arch.mid_width, side * side))?
            .transpose(1, 2)?;
        let q = self.attn_q.forward(&tokens)?;
        let k = self.attn_k.forward(&tokens)?;
        let v = self.attn_v.forward(&tokens)?;
        let scale = 1.0 / (self.arch.mid_width as f64).sqrt();
        let scores = (q.matmul(&k.transpose(1, 2)?)? * scale)?;
        let attn = softmax(&scores, 2)?;
        let f = (&tokens + &self.attn_o.forward(&attn.matmul(&v)?)?)?;
        let f = self.hook_tokens(f, LAYER_MID_ATTN, &hook, &mut captured, &mut matched)?;
        let h = f
            .transpose(1, 2)?
            .reshape((b, self.arch.mid_width, side, side))?;

        let h = self.up.forward(&h)?.silu()?;
        let h = self.hook_conv(h, LAYER_UP, &hook, &mut captured, &mut matched)?;
        let eps = self.conv_out.forward(&h)?;

        if !matched {
            let layer = match hook {
                HookSpec::Capture { layer } | HookSpec::Edit { layer, .. } => layer,
                HookSpec::None => unreachable!("matched starts true for HookSpec::None"),
            };
            return Err(LvoError::Config(format!(
                "unknown layer {layer:?}; available: {LAYERS:?}"
            )));
        }
        Ok((eps, captured))
    }

    /// Activation maps for a batch of latents at one layer, each returned
    /// as tokens by channels.
    pub(crate) fn capture_batch(
        &self,
        latents: &[Array3<f64>],
        ts: &[usize],
        class_ids: &[usize],
        layer: &str,
    ) -> Result<Vec<Array2<f64>>> {
        let (lc, lh, lw) = self.arch.latent_shape();
        let mut data = Vec::with_capacity(latents.len() * lc * lh * lw);
        for z in latents {
            if z.dim() != (lc, lh, lw) {
                return Err(LvoError::shape(
                    format!("latent {lc}x{lh}x{lw}"),
                    format!("{:?}", z.dim()),
                ));
            }
            data.extend(z.iter().copied());
        }
        let zt = Tensor::from_vec(data, (latents.len(), lc, lh, lw), &self.device)?;
        let (_, captured) = self.forward_inner(&zt, ts, class_ids, HookSpec::Capture { layer })?;
        let captured = captured.expect("capture hook matched");
        let (bsz, tokens, channels) = captured.dims3()?;
        let flat = captured.flatten_all()?.to_vec1::<f64>()?;
        let mut out = Vec::with_capacity(bsz);
        for i in 0..bsz {
            let slice = &flat[i * tokens * channels..(i + 1) * tokens * channels];
            out.push(Array2::from_shape_vec((tokens, channels), slice.to_vec()).expect("sized"));
        }
        Ok(out)
    }
}

fn aggregate(column: &Tensor, aggregation: Aggregation) -> Result<Tensor> {
    Ok(match aggregation {
        Aggregation::Max => column.max(0)?,
        Aggregation::Mean => column.mean(0)?,
    })
}

/// Builds the scalar readout in-graph so its gradient reaches `z`. The
/// top-k mask is computed from detached pre-activations with the same
/// tie rule as the ndarray encoder.
fn readout_scalar(f: &Tensor, readout: &ActivationReadout, device: &Device) -> Result<Tensor> {
    let (tokens, channels) = f.dims2()?;
    match readout {
        ActivationReadout::RawChannel {
            channel,
            aggregation,
        } => {
            if *channel >= channels {
                return Err(LvoError::Config(format!(
                    "channel {channel} out of range for width {channels}"
                )));
            }
            let column = f.narrow(1, *channel, 1)?.squeeze(1)?;
            aggregate(&column, *aggregation)
        }
        ActivationReadout::SaeFeature {
            sae,
            feature,
            aggregation,
        } => {
            if sae.input_dim() != channels {
                return Err(LvoError::shape(
                    format!("activations of width {}", sae.input_dim()),
                    format!("width {channels}"),
                ));
            }
            if *feature >= sae.dict_size() {
                return Err(LvoError::Config(format!(
                    "feature {feature} out of range for dictionary size {}",
                    sae.dict_size()
                )));
            }
            let m = sae.dict_size();
            let w_enc = Tensor::from_vec(
                sae.encoder_weights().iter().copied().collect::<Vec<f64>>(),
                (m, channels),
                device,
            )?;
            let b_enc = Tensor::from_vec(sae.encoder_bias().to_vec(), (m,), device)?;
            let b_dec = Tensor::from_vec(sae.decoder_bias().to_vec(), (channels,), device)?;
            let pre = f
                .broadcast_sub(&b_dec)?
                .matmul(&w_enc.t()?)?
                .broadcast_add(&b_enc)?;
            let pre_host = tensor_to_array2(&pre.detach())?;
            let mut mask = vec![0.0f64; tokens * m];
            for (i, row) in pre_host.rows().into_iter().enumerate() {
                for (j, keep) in topk_mask(row, sae.k()).into_iter().enumerate() {
                    if keep {
                        mask[i * m + j] = 1.0;
                    }
                }
            }
            let mask = Tensor::from_vec(mask, (tokens, m), device)?;
            let acts = (pre * mask)?.relu()?;
            let column = acts.narrow(1, *feature, 1)?.squeeze(1)?;
            aggregate(&column, *aggregation)
        }
    }
}

impl DenoiserModel for ToyDenoiser {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.arch.latent_shape()
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn layer_names(&self) -> Vec<String> {
        LAYERS.iter().map(|s| s.to_string()).collect()
    }

    fn layer_width(&self, layer: &str) -> Result<usize> {
        self.arch.layer_width(layer).ok_or_else(|| {
            LvoError::Config(format!("unknown layer {layer:?}; available: {LAYERS:?}"))
        })
    }

    fn default_layer(&self) -> String {
        LAYER_MID_ATTN.to_string()
    }

    fn forward(&self, z: &Array3<f64>, t: usize, class_id: usize) -> Result<Array3<f64>> {
        let zt = array3_to_tensor(z, &self.device)?;
        let (eps, _) = self.forward_inner(&zt, &[t], &[class_id], HookSpec::None)?;
        tensor_to_array3(&eps)
    }

    fn forward_with_hook(
        &self,
        z: &Array3<f64>,
        t: usize,
        class_id: usize,
        layer: &str,
    ) -> Result<HookedForward> {
        let zt = array3_to_tensor(z, &self.device)?;
        let (eps, captured) =
            self.forward_inner(&zt, &[t], &[class_id], HookSpec::Capture { layer })?;
        let activations = tensor_to_array2(&captured.expect("capture hook matched").squeeze(0)?)?;
        Ok(HookedForward {
            prediction: tensor_to_array3(&eps)?,
            activations,
        })
    }

    fn forward_with_edit(
        &self,
        z: &Array3<f64>,
        t: usize,
        class_id: usize,
        layer: &str,
        edit: &ActivationEdit,
    ) -> Result<Array3<f64>> {
        let ActivationEdit::AddPerChannel(delta) = edit;
        let width = self.layer_width(layer)?;
        if delta.len() != width {
            return Err(LvoError::shape(
                format!("per-channel offset of width {width}"),
                delta.len(),
            ));
        }
        let delta = Tensor::from_vec(delta.to_vec(), (width,), &self.device)?;
        let zt = array3_to_tensor(z, &self.device)?;
        let (eps, _) = self.forward_inner(
            &zt,
            &[t],
            &[class_id],
            HookSpec::Edit {
                layer,
                delta: &delta,
            },
        )?;
        tensor_to_array3(&eps)
    }

    fn activation_grad(
        &self,
        z: &Array3<f64>,
        t: usize,
        class_id: usize,
        layer: &str,
        readout: &ActivationReadout,
    ) -> Result<(f64, Array3<f64>)> {
        let zvar = Var::from_tensor(&array3_to_tensor(z, &self.device)?)?;
        let (_, captured) = self.forward_inner(
            zvar.as_tensor(),
            &[t],
            &[class_id],
            HookSpec::Capture { layer },
        )?;
        let f = captured.expect("capture hook matched").squeeze(0)?;
        let scalar = readout_scalar(&f, readout, &self.device)?;
        let value = scalar.to_scalar::<f64>()?;
        let grads = scalar.backward()?;
        let grad = match grads.get(zvar.as_tensor()) {
            Some(g) => tensor_to_array3(&g.squeeze(0)?)?,
            None => Array3::zeros(self.arch.latent_shape()),
        };
        Ok((value, grad))
    }
}
