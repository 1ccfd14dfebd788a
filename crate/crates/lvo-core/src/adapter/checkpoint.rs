//! On-disk checkpoint bundle: a JSON manifest next to safetensors files
//! for the VAE, the denoiser, and the SAE dictionary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::adapter::dataset::ShapesDatasetConfig;
use crate::adapter::toy::{ToyArch, ToyDenoiser, ToyVae, LAYERS};
use crate::error::{LvoError, Result};
use crate::sae::SparseAutoencoder;
use crate::schedule::{build_scheduler, ScheduleKind, SchedulerTable, BETA_END, BETA_START};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "lvo-toy-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningInfo {
    /// Only `class_label` conditioning exists in this bundle format.
    pub kind: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerInfo {
    pub kind: ScheduleKind,
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelLossInfo {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeInfo {
    pub file: String,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    pub recon_mae: f64,
    pub recon_mae_bound: f64,
    pub loss: ModelLossInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserInfo {
    pub file: String,
    pub loss: ModelLossInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeInfo {
    pub file: String,
    pub layer: String,
    pub input_dim: usize,
    pub dict_size: usize,
    pub k: usize,
    pub loss: ModelLossInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub arch: ToyArch,
    pub conditioning: ConditioningInfo,
    pub image_shape: Vec<usize>,
    pub latent_shape: Vec<usize>,
    pub layers: BTreeMap<String, usize>,
    pub default_layer: String,
    pub scheduler: SchedulerInfo,
    pub dataset: ShapesDatasetConfig,
    pub vae: VaeInfo,
    pub denoiser: DenoiserInfo,
    pub sae: Option<SaeInfo>,
}

/// A loaded checkpoint: models, schedule, and dictionary together.
pub struct ToyLdm {
    pub manifest: CheckpointManifest,
    pub vae: ToyVae,
    pub denoiser: ToyDenoiser,
    pub scheduler: SchedulerTable,
    pub sae: Option<Arc<SparseAutoencoder>>,
}

impl ToyLdm {
    pub fn class_names(&self) -> &[String] {
        &self.manifest.conditioning.class_names
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.class_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                LvoError::Config(format!(
                    "unknown class {name:?}; available: {:?}",
                    self.class_names()
                ))
            })
    }

    pub fn t_total(&self) -> usize {
        self.scheduler.len()
    }

    /// The SAE, or an error naming what is missing.
    pub fn sae(&self) -> Result<&Arc<SparseAutoencoder>> {
        self.sae
            .as_ref()
            .ok_or_else(|| LvoError::Checkpoint("checkpoint bundles no SAE".into()))
    }
}

pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    vae: &ToyVae,
    denoiser: &ToyDenoiser,
    sae: Option<&SparseAutoencoder>,
) -> Result<()> {
    if manifest.format != FORMAT_TAG {
        return Err(LvoError::Checkpoint(format!(
            "format must be {FORMAT_TAG:?}, got {:?}",
            manifest.format
        )));
    }
    if manifest.sae.is_some() != sae.is_some() {
        return Err(LvoError::Checkpoint(
            "manifest and bundle disagree about the SAE".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), bytes)?;
    vae.params.save(&dir.join(&manifest.vae.file))?;
    denoiser.params.save(&dir.join(&manifest.denoiser.file))?;
    if let (Some(info), Some(sae)) = (&manifest.sae, sae) {
        save_sae_tensors(&dir.join(&info.file), sae)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<ToyLdm> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT_TAG {
        return Err(LvoError::Checkpoint(format!(
            "unsupported checkpoint format {:?}, expected {FORMAT_TAG:?}",
            manifest.format
        )));
    }
    let arch = manifest.arch;
    validate_manifest(&manifest, &arch)?;

    let vae = ToyVae::from_file(
        arch,
        &dir.join(&manifest.vae.file),
        Array1::from_vec(manifest.vae.latent_mean.clone()),
        Array1::from_vec(manifest.vae.latent_std.clone()),
        device,
    )?;
    let denoiser = ToyDenoiser::from_file(arch, &dir.join(&manifest.denoiser.file), device)?;
    let scheduler = build_scheduler(manifest.scheduler.t_total, manifest.scheduler.kind)?;
    let sae = match &manifest.sae {
        Some(info) => Some(Arc::new(load_sae_tensors(&dir.join(&info.file), info, device)?)),
        None => None,
    };
    Ok(ToyLdm {
        manifest,
        vae,
        denoiser,
        scheduler,
        sae,
    })
}

fn validate_manifest(manifest: &CheckpointManifest, arch: &ToyArch) -> Result<()> {
    let check = |ok: bool, what: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(LvoError::Checkpoint(format!("manifest mismatch: {what}")))
        }
    };
    check(
        manifest.conditioning.kind == "class_label",
        "conditioning kind must be class_label",
    )?;
    check(
        manifest.conditioning.num_classes == arch.num_classes
            && manifest.conditioning.class_names.len() == arch.num_classes,
        "class names must match the class count",
    )?;
    let (ic, ih, iw) = arch.image_shape();
    check(manifest.image_shape == [ic, ih, iw], "image shape")?;
    let (lc, lh, lw) = arch.latent_shape();
    check(manifest.latent_shape == [lc, lh, lw], "latent shape")?;
    check(manifest.layers.len() == LAYERS.len(), "layer table size")?;
    for (name, width) in &manifest.layers {
        check(
            arch.layer_width(name) == Some(*width),
            &format!("width of layer {name:?}"),
        )?;
    }
    check(
        manifest.layers.contains_key(&manifest.default_layer),
        "default layer must be listed",
    )?;
    check(
        manifest.scheduler.kind == ScheduleKind::Linear
            && manifest.scheduler.beta_start == BETA_START
            && manifest.scheduler.beta_end == BETA_END
            && manifest.scheduler.t_total >= 1,
        "scheduler parameters",
    )?;
    check(
        manifest.vae.latent_mean.len() == lc && manifest.vae.latent_std.len() == lc,
        "latent statistics length",
    )?;
    if !(manifest.vae.recon_mae <= manifest.vae.recon_mae_bound) {
        return Err(LvoError::Checkpoint(format!(
            "VAE reconstruction error {} exceeds the recorded bound {}",
            manifest.vae.recon_mae, manifest.vae.recon_mae_bound
        )));
    }
    if let Some(info) = &manifest.sae {
        check(
            arch.layer_width(&info.layer) == Some(info.input_dim),
            "SAE layer width",
        )?;
    }
    Ok(())
}

fn save_sae_tensors(path: &Path, sae: &SparseAutoencoder) -> Result<()> {
    let device = Device::Cpu;
    let (m, d) = (sae.dict_size(), sae.input_dim());
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<f64>>();
    let mut map = HashMap::new();
    map.insert(
        "w_enc".to_string(),
        Tensor::from_vec(flat(sae.encoder_weights()), (m, d), &device)?,
    );
    map.insert(
        "b_enc".to_string(),
        Tensor::from_vec(sae.encoder_bias().to_vec(), (m,), &device)?,
    );
    map.insert(
        "w_dec".to_string(),
        Tensor::from_vec(flat(sae.decoder_weights()), (m, d), &device)?,
    );
    map.insert(
        "b_dec".to_string(),
        Tensor::from_vec(sae.decoder_bias().to_vec(), (d,), &device)?,
    );
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

fn load_sae_tensors(path: &Path, info: &SaeInfo, device: &Device) -> Result<SparseAutoencoder> {
    let mut tensors = candle_core::safetensors::load(path, device)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| LvoError::Checkpoint(format!("missing SAE tensor {name:?}")))?;
        if t.dims() != shape {
            return Err(LvoError::shape(
                format!("{shape:?} for SAE tensor {name:?}"),
                format!("{:?}", t.dims()),
            ));
        }
        Ok(t.to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    };
    let (m, d) = (info.dict_size, info.input_dim);
    let w_enc = Array2::from_shape_vec((m, d), take("w_enc", &[m, d])?).expect("sized above");
    let b_enc = Array1::from_vec(take("b_enc", &[m])?);
    let w_dec = Array2::from_shape_vec((m, d), take("w_dec", &[m, d])?).expect("sized above");
    let b_dec = Array1::from_vec(take("b_dec", &[d])?);
    SparseAutoencoder::new(w_enc, b_enc, w_dec, b_dec, info.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::DenoiserModel;
    use crate::adapter::VaeCodec;
    use crate::rng::derive_rng;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn test_manifest(arch: ToyArch) -> CheckpointManifest {
        let (ic, ih, iw) = arch.image_shape();
        let (lc, lh, lw) = arch.latent_shape();
        let layers = LAYERS
            .iter()
            .map(|&l| (l.to_string(), arch.layer_width(l).unwrap()))
            .collect();
        CheckpointManifest {
            format: FORMAT_TAG.to_string(),
            arch,
            conditioning: ConditioningInfo {
                kind: "class_label".to_string(),
                num_classes: 3,
                class_names: vec!["circle".into(), "square".into(), "triangle".into()],
            },
            image_shape: vec![ic, ih, iw],
            latent_shape: vec![lc, lh, lw],
            layers,
            default_layer: "mid_attn".to_string(),
            scheduler: SchedulerInfo {
                kind: ScheduleKind::Linear,
                t_total: 10,
                beta_start: BETA_START,
                beta_end: BETA_END,
            },
            dataset: ShapesDatasetConfig { n: 8, seed: 3 },
            vae: VaeInfo {
                file: "vae.safetensors".to_string(),
                latent_mean: vec![0.1, -0.2, 0.0, 0.3],
                latent_std: vec![1.0, 1.1, 0.9, 1.2],
                recon_mae: 0.05,
                recon_mae_bound: 0.08,
                loss: ModelLossInfo {
                    initial: 0.2,
                    last: 0.01,
                },
            },
            denoiser: DenoiserInfo {
                file: "denoiser.safetensors".to_string(),
                loss: ModelLossInfo {
                    initial: 1.1,
                    last: 0.4,
                },
            },
            sae: Some(SaeInfo {
                file: "sae.safetensors".to_string(),
                layer: "mid_attn".to_string(),
                input_dim: 48,
                dict_size: 16,
                k: 3,
                loss: ModelLossInfo {
                    initial: 2.0,
                    last: 0.5,
                },
            }),
        }
    }

    fn random_sae(seed: u64) -> SparseAutoencoder {
        let mut rng = derive_rng(seed, &["ckpt", "sae"]);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        SparseAutoencoder::new(
            Array2::from_shape_vec((16, 48), draw(16 * 48)).unwrap(),
            Array1::from_vec(draw(16)),
            Array2::from_shape_vec((16, 48), draw(16 * 48)).unwrap(),
            Array1::from_vec(draw(48)),
            3,
        )
        .unwrap()
    }

    #[test]
    fn save_and_load_roundtrip_bitwise() {
        let device = Device::Cpu;
        let arch = ToyArch::default();
        let manifest = test_manifest(arch);
        let mut vae = ToyVae::new(arch, 40, &device).unwrap();
        vae.set_latent_stats(
            Array1::from_vec(manifest.vae.latent_mean.clone()),
            Array1::from_vec(manifest.vae.latent_std.clone()),
        )
        .unwrap();
        let denoiser = ToyDenoiser::new(arch, 41, &device).unwrap();
        let sae = random_sae(42);

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &manifest, &vae, &denoiser, Some(&sae)).unwrap();
        let loaded = load_checkpoint(dir.path(), &device).unwrap();

        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.t_total(), 10);
        assert_eq!(loaded.class_id("square").unwrap(), 1);
        assert!(loaded.class_id("hexagon").is_err());

        let mut rng = derive_rng(43, &["ckpt", "probe"]);
        let mut z = Array3::zeros((4, 8, 8));
        z.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(
            denoiser.forward(&z, 4, 2).unwrap(),
            loaded.denoiser.forward(&z, 4, 2).unwrap()
        );

        let mut image = Array3::zeros((3, 32, 32));
        image.mapv_inplace(|_| rng.random_range(0.0..1.0));
        assert_eq!(vae.encode(&image).unwrap(), loaded.vae.encode(&image).unwrap());

        let bundled = loaded.sae().unwrap();
        assert_eq!(bundled.encoder_weights(), sae.encoder_weights());
        // Loading renormalizes decoder rows that are already unit norm,
        // which may move the last bit.
        for (a, b) in bundled.decoder_weights().iter().zip(sae.decoder_weights().iter()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert_eq!(bundled.k(), sae.k());
    }

    #[test]
    fn corrupted_manifests_are_rejected() {
        let device = Device::Cpu;
        let arch = ToyArch::default();
        let manifest = test_manifest(arch);
        let mut vae = ToyVae::new(arch, 50, &device).unwrap();
        vae.set_latent_stats(
            Array1::from_vec(manifest.vae.latent_mean.clone()),
            Array1::from_vec(manifest.vae.latent_std.clone()),
        )
        .unwrap();
        let denoiser = ToyDenoiser::new(arch, 51, &device).unwrap();
        let sae = random_sae(52);

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &manifest, &vae, &denoiser, Some(&sae)).unwrap();

        let rewrite = |m: &CheckpointManifest| {
            let mut bytes = serde_json::to_vec_pretty(m).unwrap();
            bytes.push(b'\n');
            fs::write(dir.path().join(MANIFEST_FILE), bytes).unwrap();
        };

        let mut bad = manifest.clone();
        bad.vae.recon_mae = bad.vae.recon_mae_bound + 0.1;
        rewrite(&bad);
        assert!(load_checkpoint(dir.path(), &device).is_err());

        let mut bad = manifest.clone();
        bad.layers.insert("mid_attn".to_string(), 999);
        rewrite(&bad);
        assert!(load_checkpoint(dir.path(), &device).is_err());

        let mut bad = manifest.clone();
        bad.scheduler.beta_start = 0.5;
        rewrite(&bad);
        assert!(load_checkpoint(dir.path(), &device).is_err());

        let mut bad = manifest.clone();
        bad.format = "other".to_string();
        rewrite(&bad);
        assert!(load_checkpoint(dir.path(), &device).is_err());

        rewrite(&manifest);
        assert!(load_checkpoint(dir.path(), &device).is_ok());
    }

    #[test]
    fn manifest_serializes_final_loss_under_its_public_name() {
        let manifest = test_manifest(ToyArch::default());
        let text = serde_json::to_string(&manifest).unwrap();
        assert!(text.contains("\"final\""));
        assert!(text.contains("\"format\""));
        let back: CheckpointManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn save_rejects_inconsistent_sae_presence() {
        let device = Device::Cpu;
        let arch = ToyArch::default();
        let manifest = test_manifest(arch);
        let vae = ToyVae::new(arch, 60, &device).unwrap();
        let denoiser = ToyDenoiser::new(arch, 61, &device).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // Manifest announces an SAE but none is provided.
        assert!(save_checkpoint(dir.path(), &manifest, &vae, &denoiser, None).is_err());
    }
}
