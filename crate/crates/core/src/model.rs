//! A network bundled with its configuration and trained parameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{image_batch, Grid, ImageSample};
use crate::error::{Error, Result};
use crate::nn::{build_network, predict, NetworkConfig, NetworkGraph, ParameterStore};
use crate::tensor::Tensor4;
use crate::train::{load_checkpoint, save_checkpoint};

pub const MODEL_MANIFEST_FILE: &str = "model.json";
pub const MODEL_CHECKPOINT_FILE: &str = "model.ckpt";

/// Items per eval-mode forward when predicting many images.
pub const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub graph: NetworkGraph,
    pub params: ParameterStore<f32>,
}

impl Model {
    pub fn new(config: NetworkConfig, params: ParameterStore<f32>) -> Result<Self> {
        let graph = build_network(&config)?;
        params.check_against(&graph)?;
        Ok(Model {
            config,
            graph,
            params,
        })
    }

    /// Eval-mode probabilities for an `(n, in_channels, h, w)` batch, processed in chunks.
    pub fn predict_tensor(&self, input: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        predict_batched(&self.graph, &self.params, input)
    }

    /// Writes the checkpoint and its manifest into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.params, &dir.join(MODEL_CHECKPOINT_FILE))?;
        let manifest = ModelManifest {
            checkpoint: PathBuf::from(MODEL_CHECKPOINT_FILE),
            net_config: self.config.clone(),
        };
        let path = dir.join(MODEL_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text)?;
        manifest.load(manifest_path.parent().unwrap_or(Path::new(".")))
    }
}

/// On-disk description of a single network. The checkpoint path is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub checkpoint: PathBuf,
    pub net_config: NetworkConfig,
}

impl ModelManifest {
    pub fn load(&self, base: &Path) -> Result<Model> {
        Model::new(self.net_config.clone(), load_checkpoint(&base.join(&self.checkpoint))?)
    }
}

/// Eval-mode forward over `input` in chunks of [`EVAL_BATCH`] items.
pub fn predict_batched(
    graph: &NetworkGraph,
    params: &ParameterStore<f32>,
    input: &Tensor4<f32>,
) -> Result<Tensor4<f32>> {
    let n = input.batch();
    let mut outs = Vec::with_capacity(n.div_ceil(EVAL_BATCH));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let chunk: Vec<Tensor4<f32>> = (start..end).map(|i| input.item(i)).collect();
        outs.push(predict(graph, params, &Tensor4::stack(&chunk)?)?);
        start = end;
    }
    Tensor4::stack(&outs)
}

/// Anything that maps grayscale images to foreground probability maps.
pub trait Segmenter {
    fn input_size(&self) -> (usize, usize);

    fn predict_images(&self, images: &[&ImageSample]) -> Result<Vec<Grid<f32>>>;

    fn predict_image(&self, image: &Grid<f32>) -> Result<Grid<f32>> {
        let sample = ImageSample::new(
            "predict",
            image.clone(),
            Grid::filled(image.height(), image.width(), 0),
        )?;
        Ok(self
            .predict_images(&[&sample])?
            .pop()
            .expect("one prediction per image"))
    }
}

pub(crate) fn check_input_size(expected: (usize, usize), images: &[&ImageSample]) -> Result<()> {
    if let Some(s) = images.iter().find(|s| s.dims() != expected) {
        return Err(Error::Shape(format!(
            "{}: size {:?} does not match network input {:?}",
            s.id,
            s.dims(),
            expected
        )));
    }
    Ok(())
}

pub(crate) fn split_maps(maps: Tensor4<f32>) -> Vec<Grid<f32>> {
    let (h, w) = (maps.height(), maps.width());
    maps.into_vec()
        .chunks(h * w)
        .map(|c| Grid::new(h, w, c.to_vec()).expect("plane size"))
        .collect()
}

impl Segmenter for Model {
    fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }

    fn predict_images(&self, images: &[&ImageSample]) -> Result<Vec<Grid<f32>>> {
        if self.config.in_channels != 1 {
            return Err(Error::Config(format!(
                "a {}-channel network cannot segment grayscale images on its own",
                self.config.in_channels
            )));
        }
        if images.is_empty() {
            return Ok(vec![]);
        }
        check_input_size(self.input_size(), images)?;
        Ok(split_maps(self.predict_tensor(&image_batch(images)?)?))
    }
}
