//! Two-stage cascade: a second network refines the first one's probability map.
//!
//! Stage 2 sees the image and the stage-1 map as a two-channel input. Its
//! scale injections resize both channels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{image_batch, Grid, ImageSample};
use crate::error::{Error, Result};
use crate::model::{check_input_size, split_maps, Model, Segmenter};
use crate::nn::NetworkConfig;
use crate::tensor::Tensor4;
use crate::train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainHistory, TrainSet};

pub const MANIFEST_FILE: &str = "cascade.json";
pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";

#[derive(Debug, Clone)]
pub struct CascadeModel {
    stage1: Model,
    stage2: Model,
}

/// The stage-2 configuration for a stage-1 `config`: one extra input channel.
pub fn stage2_config(config: &NetworkConfig) -> NetworkConfig {
    NetworkConfig {
        in_channels: config.in_channels + 1,
        ..config.clone()
    }
}

impl CascadeModel {
    pub fn new(stage1: Model, stage2: Model) -> Result<Self> {
        if stage2.config.in_channels != stage1.config.in_channels + 1 {
            return Err(Error::Config(format!(
                "stage 2 needs {} input channels, has {}",
                stage1.config.in_channels + 1,
                stage2.config.in_channels
            )));
        }
        if stage1.config.input_size != stage2.config.input_size {
            return Err(Error::Config(format!(
                "stage input sizes differ: {:?} vs {:?}",
                stage1.config.input_size, stage2.config.input_size
            )));
        }
        Ok(CascadeModel { stage1, stage2 })
    }

    pub fn stage1(&self) -> &Model {
        &self.stage1
    }

    pub fn stage2(&self) -> &Model {
        &self.stage2
    }

    /// Writes both checkpoints and the manifest into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.stage1.params, &dir.join(STAGE1_FILE))?;
        save_checkpoint(&self.stage2.params, &dir.join(STAGE2_FILE))?;
        let manifest = CascadeManifest {
            stage1: PathBuf::from(STAGE1_FILE),
            stage2: PathBuf::from(STAGE2_FILE),
            net_config: self.stage1.config.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: CascadeManifest = serde_json::from_str(&text)?;
        manifest.load(manifest_path.parent().unwrap_or(Path::new(".")))
    }
}

/// On-disk description of a cascade. Checkpoint paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeManifest {
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    /// Stage-1 configuration; stage 2 adds one input channel.
    pub net_config: NetworkConfig,
}

impl CascadeManifest {
    pub fn load(&self, base: &Path) -> Result<CascadeModel> {
        let stage1 = Model::new(self.net_config.clone(), load_checkpoint(&base.join(&self.stage1))?)?;
        let stage2 = Model::new(
            stage2_config(&self.net_config),
            load_checkpoint(&base.join(&self.stage2))?,
        )?;
        CascadeModel::new(stage1, stage2)
    }
}

/// Appends the stage-1 probability map to each item of `inputs` as a new last channel.
pub fn append_map(inputs: &Tensor4<f32>, maps: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = inputs.dims();
    if maps.dims() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "maps {:?} do not match inputs {:?}",
            maps.dims(),
            inputs.dims()
        )));
    }
    let mut out = Vec::with_capacity(n * (c + 1) * h * w);
    for (x, m) in inputs.data().chunks(c * h * w).zip(maps.data().chunks(h * w)) {
        out.extend_from_slice(x);
        out.extend_from_slice(m);
    }
    Tensor4::from_vec([n, c + 1, h, w], out)
}

/// Stage-2 inputs for `samples`: channel 0 is the image, channel 1 the stage-1
/// eval-mode probability map (not binarized).
pub fn make_stage2_inputs(samples: &[&ImageSample], stage1: &Model) -> Result<Tensor4<f32>> {
    check_input_size(stage1.config.input_size, samples)?;
    let images = image_batch(samples)?;
    let maps = stage1.predict_tensor(&images)?;
    append_map(&images, &maps)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeHistory {
    pub stage1: TrainHistory,
    pub stage2: TrainHistory,
}

/// Trains stage 1, freezes it, then trains stage 2 on image ⊕ stage-1 map
/// with the same training configuration.
pub fn train_cascade(
    train_samples: &[ImageSample],
    val_samples: &[ImageSample],
    config: &NetworkConfig,
    tc: &TrainConfig,
) -> Result<(CascadeModel, CascadeHistory)> {
    if config.in_channels != 1 {
        return Err(Error::Config(format!(
            "cascade stage 1 takes grayscale images, got in_channels = {}",
            config.in_channels
        )));
    }
    let train_set = TrainSet::from_samples(train_samples)?;
    let val_set = if val_samples.is_empty() {
        None
    } else {
        Some(TrainSet::from_samples(val_samples)?)
    };
    log::info!("cascade stage 1");
    let (stage1, h1) = train(config, &train_set, val_set.as_ref(), tc)?;
    log::info!("cascade stage 2");
    let (stage2, h2) = train_stage2(&stage1, train_samples, val_samples, tc)?;
    Ok((
        CascadeModel::new(stage1, stage2)?,
        CascadeHistory {
            stage1: h1,
            stage2: h2,
        },
    ))
}

/// Trains a stage-2 network on top of a fixed `stage1`.
pub fn train_stage2(
    stage1: &Model,
    train_samples: &[ImageSample],
    val_samples: &[ImageSample],
    tc: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let stage2_set = |samples: &[ImageSample]| -> Result<TrainSet> {
        let refs: Vec<&ImageSample> = samples.iter().collect();
        TrainSet::with_inputs(samples, make_stage2_inputs(&refs, stage1)?)
    };
    let train2 = stage2_set(train_samples)?;
    let val2 = if val_samples.is_empty() {
        None
    } else {
        Some(stage2_set(val_samples)?)
    };
    train(&stage2_config(&stage1.config), &train2, val2.as_ref(), tc)
}

/// Stage-2 probability maps for a batch of grayscale images.
pub fn predict_cascade(model: &CascadeModel, images: &[&ImageSample]) -> Result<Vec<Grid<f32>>> {
    if images.is_empty() {
        return Ok(vec![]);
    }
    let inputs = make_stage2_inputs(images, &model.stage1)?;
    Ok(split_maps(model.stage2.predict_tensor(&inputs)?))
}

impl Segmenter for CascadeModel {
    fn input_size(&self) -> (usize, usize) {
        self.stage1.config.input_size
    }

    fn predict_images(&self, images: &[&ImageSample]) -> Result<Vec<Grid<f32>>> {
        predict_cascade(self, images)
    }
}
