//! Model adapters: the traits the rest of the crate uses to talk to a
//! latent diffusion model, plus the ancestral sampler that drives them.

pub mod checkpoint;
pub mod dataset;
pub mod toy;
pub mod train;

use std::sync::Arc;

use candle_core::Device;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LvoError, Result};
use crate::rng::derive_rng;
use crate::sae::SparseAutoencoder;
use crate::schedule::{draw_noise, SchedulerTable};

/// How a tokens-by-channels activation map collapses to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
}

/// Scalar readout taken from a hooked activation map.
#[derive(Clone)]
pub enum ActivationReadout {
    RawChannel {
        channel: usize,
        aggregation: Aggregation,
    },
    SaeFeature {
        sae: Arc<SparseAutoencoder>,
        feature: usize,
        aggregation: Aggregation,
    },
}

/// Modification applied to a hooked activation map mid-forward.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationEdit {
    /// Adds a fixed per-channel offset to every token.
    AddPerChannel(Array1<f64>),
}

/// Denoiser output plus the activation map captured at one layer.
pub struct HookedForward {
    pub prediction: Array3<f64>,
    /// Tokens by channels.
    pub activations: Array2<f64>,
}

/// Image-to-latent codec with per-channel standardized latents.
pub trait VaeCodec {
    fn image_shape(&self) -> (usize, usize, usize);
    fn latent_shape(&self) -> (usize, usize, usize);
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>>;
    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>>;
}

/// Noise-prediction network with named hook points.
pub trait DenoiserModel {
    fn latent_shape(&self) -> (usize, usize, usize);
    fn num_classes(&self) -> usize;
    fn layer_names(&self) -> Vec<String>;
    fn layer_width(&self, layer: &str) -> Result<usize>;
    fn default_layer(&self) -> String;
    fn forward(&self, z: &Array3<f64>, t: usize, class_id: usize) -> Result<Array3<f64>>;
    fn forward_with_hook(
        &self,
        z: &Array3<f64>,
        t: usize,
        class_id: usize,
        layer: &str,
    ) -> Result<HookedForward>;
    fn forward_with_edit(
        &self,
        z: &Array3<f64>,
        t: usize,
        class_id: usize,
        layer: &str,
        edit: &ActivationEdit,
    ) -> Result<Array3<f64>>;
    /// Scalar readout of the hooked activations and its gradient in `z`.
    fn activation_grad(
        &self,
        z: &Array3<f64>,
        t: usize,
        class_id: usize,
        layer: &str,
        readout: &ActivationReadout,
    ) -> Result<(f64, Array3<f64>)>;
}

/// Per-timestep activation edits applied at one layer while sampling.
/// `edits[t]` of `None` leaves that forward pass untouched.
#[derive(Clone, Debug)]
pub struct SamplingEditPlan {
    pub layer: String,
    pub edits: Vec<Option<ActivationEdit>>,
}

/// Snapshot handed to the sampling observer before each update, so the
/// latent is the input of the step at timestep `t`.
pub struct SampleStep<'a> {
    pub t: usize,
    pub latent: &'a Array3<f64>,
    pub prediction: &'a Array3<f64>,
}

/// Ancestral sampling from pure noise down to `t = 0`. The posterior
/// variance is the small fixed choice, and no noise is added at the
/// final step.
pub fn sample_latent(
    model: &dyn DenoiserModel,
    schedule: &SchedulerTable,
    class_id: usize,
    seed: u64,
    plan: Option<&SamplingEditPlan>,
    mut observer: Option<&mut dyn FnMut(SampleStep<'_>)>,
) -> Result<Array3<f64>> {
    if class_id >= model.num_classes() {
        return Err(LvoError::Config(format!(
            "class id {class_id} out of range for a model with {} classes",
            model.num_classes()
        )));
    }
    if let Some(plan) = plan {
        model.layer_width(&plan.layer)?;
        if plan.edits.len() != schedule.len() {
            return Err(LvoError::shape(
                format!("one edit slot per timestep ({})", schedule.len()),
                plan.edits.len(),
            ));
        }
    }
    let shape = model.latent_shape();
    let mut init_rng = derive_rng(seed, &["sample", "init"]);
    let mut z = draw_noise(shape, &mut init_rng);
    let mut noise_rng = derive_rng(seed, &["sample", "noise"]);
    for t in (0..schedule.len()).rev() {
        let prediction = match plan.and_then(|p| p.edits[t].as_ref().map(|e| (p, e))) {
            Some((plan, edit)) => model.forward_with_edit(&z, t, class_id, &plan.layer, edit)?,
            None => model.forward(&z, t, class_id)?,
        };
        if let Some(observer) = observer.as_deref_mut() {
            observer(SampleStep {
                t,
                latent: &z,
                prediction: &prediction,
            });
        }
        let beta = schedule.beta(t)?;
        let alpha = schedule.alpha(t)?;
        let alpha_bar = schedule.alpha_bar(t)?;
        // beta == 0 forces both ratios below to 0/0; the step is then the
        // identity scaled by 1/sqrt(alpha) with no noise.
        let eps_coeff = if beta == 0.0 {
            0.0
        } else {
            beta / (1.0 - alpha_bar).sqrt()
        };
        let mut mean = &z - &prediction.mapv(|v| v * eps_coeff);
        mean.mapv_inplace(|v| v / alpha.sqrt());
        z = if t > 0 {
            let alpha_bar_prev = schedule.alpha_bar(t - 1)?;
            let sigma = if beta == 0.0 {
                0.0
            } else {
                ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta).sqrt()
            };
            let noise = draw_noise(shape, &mut noise_rng);
            mean + noise.mapv(|v| v * sigma)
        } else {
            mean
        };
    }
    Ok(z)
}

/// Samples a latent and decodes it. Returns `(image, latent)`.
pub fn sample_image(
    model: &dyn DenoiserModel,
    codec: &dyn VaeCodec,
    schedule: &SchedulerTable,
    class_id: usize,
    seed: u64,
    plan: Option<&SamplingEditPlan>,
    observer: Option<&mut dyn FnMut(SampleStep<'_>)>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let latent = sample_latent(model, schedule, class_id, seed, plan, observer)?;
    let image = codec.decode(&latent)?;
    Ok((image, latent))
}

/// Resolves the compute device from `LVO_DEVICE`. Only the CPU backend
/// is compiled in, so anything other than unset, empty, or `cpu` is an
/// error rather than a silent fallback.
pub fn device_from_env() -> Result<Device> {
    match std::env::var("LVO_DEVICE") {
        Err(std::env::VarError::NotPresent) => Ok(Device::Cpu),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(LvoError::Config(format!(
            "unsupported LVO_DEVICE {v:?}; this build only provides \"cpu\""
        ))),
        Err(e) => Err(LvoError::Config(format!("cannot read LVO_DEVICE: {e}"))),
    }
}
