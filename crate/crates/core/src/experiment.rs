//! Experiment configuration and the runs behind each CLI subcommand.
//!
//! Configs are JSON. Every field can be overridden by a dotted key
//! (`train.epochs`, `network.scale_inputs`, ...) whose value is parsed as JSON,
//! falling back to a plain string. Precedence: defaults < file < `CDSL_SEED` < overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cascade::{train_cascade, CascadeHistory, CascadeManifest, CascadeModel};
use crate::data::{
    load_dataset, make_folds, read_image, save_dataset, split_train_val, synth_dataset, write_png,
    Grid, ImageSample, SPATIAL_MULTIPLE,
};
use crate::error::{Error, Result};
use crate::metrics::{binarize, evaluate_dataset, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{check_input_size, Model, ModelManifest, Segmenter};
use crate::nn::NetworkConfig;
use crate::train::{load_checkpoint, train, TrainConfig, TrainHistory, TrainSet};

pub const SEED_ENV: &str = "CDSL_SEED";
pub const RUN_FILE: &str = "run.json";
pub const CV_REPORT_FILE: &str = "cv_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_synth_n")]
    pub n: usize,
    /// Image side; defaults to the network input height.
    #[serde(default)]
    pub size: Option<usize>,
}

fn default_synth_n() -> usize {
    16
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: default_synth_n(),
            size: None,
        }
    }
}

/// A dataset directory, or synthetic data when `root` is null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthSpec,
}

/// Published full-scale results a preset corresponds to. Reported, never checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTargets {
    pub dice: f64,
    #[serde(default)]
    pub mean_iou: Option<f64>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    /// `train.seed` is replaced by the top-level `seed` (or a per-fold seed derived from it).
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cascade: bool,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub reference: Option<ReferenceTargets>,
}

fn default_k_folds() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    crate::data::DEFAULT_VAL_FRACTION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), then applies the seed variable and overrides.
    pub fn load(
        path: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            value["seed"] = Value::from(seed);
        }
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        config.resolved()
    }

    /// Materializes derived defaults and checks every invariant.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        if self.data.root.is_none() && self.data.synth.size.is_none() {
            let (h, w) = self.network.input_size;
            if h != w {
                return Err(Error::Config(format!(
                    "synthetic images are square; set data.synth.size for input size {h}x{w}"
                )));
            }
            self.data.synth.size = Some(h);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        if self.cascade && self.network.in_channels != 1 {
            return Err(Error::Config("a cascade needs network.in_channels = 1".into()));
        }
        if self.data.root.is_none() {
            let size = self.data.synth.size.unwrap_or(0);
            if (size, size) != self.network.input_size {
                return Err(Error::Config(format!(
                    "data.synth.size {size} does not match network.input_size {:?}",
                    self.network.input_size
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with `output_dir` blanked, since the
    /// destination does not affect results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn write_run_file(&self) -> Result<PathBuf> {
        let dir = &self.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_FILE);
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Sets the dotted `key` in `root` to `raw` parsed as JSON, or as a string if that fails.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("--{key}: '{}' is not an object", parts[..i].join(".")))
        })?;
        if !obj.contains_key(*part) {
            let known: Vec<&str> = obj.keys().map(String::as_str).collect();
            return Err(Error::Config(format!(
                "unknown config key --{key} (at '{part}'; expected one of {})",
                known.join(", ")
            )));
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Top-level config keys, for telling overrides apart from ordinary flags.
pub fn config_keys() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => vec![],
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// The configured dataset, sorted by id.
pub fn load_samples(config: &ExperimentConfig) -> Result<Vec<ImageSample>> {
    let samples = match &config.data.root {
        Some(root) => load_dataset(root)?,
        None => synth_dataset(
            config.data.synth.n,
            config.data.synth.size.unwrap_or(config.network.input_size.0),
            config.seed,
        )?,
    };
    let refs: Vec<&ImageSample> = samples.iter().collect();
    check_input_size(config.network.input_size, &refs)?;
    Ok(samples)
}

fn select(samples: &[ImageSample], ids: &[String]) -> Vec<ImageSample> {
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    samples
        .iter()
        .filter(|s| wanted.contains(s.id.as_str()))
        .cloned()
        .collect()
}

/// Per-fold seed derived from the experiment seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// A trained single network or cascade.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Trained {
    Single(Model),
    Cascade(CascadeModel),
}

impl Trained {
    pub fn segmenter(&self) -> &dyn Segmenter {
        match self {
            Trained::Single(m) => m,
            Trained::Cascade(c) => c,
        }
    }

    /// Saves into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        match self {
            Trained::Single(m) => m.save(dir),
            Trained::Cascade(c) => c.save(dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum History {
    Cascade(CascadeHistory),
    Single(TrainHistory),
}

/// Trains the configured model on `train_samples`, validating on `val_samples`.
pub fn fit(
    config: &ExperimentConfig,
    train_samples: &[ImageSample],
    val_samples: &[ImageSample],
    seed: u64,
) -> Result<(Trained, History)> {
    let tc = TrainConfig {
        seed,
        ..config.train.clone()
    };
    if config.cascade {
        let (c, h) = train_cascade(train_samples, val_samples, &config.network, &tc)?;
        return Ok((Trained::Cascade(c), History::Cascade(h)));
    }
    let train_set = TrainSet::from_samples(train_samples)?;
    let val_set = if val_samples.is_empty() {
        None
    } else {
        Some(TrainSet::from_samples(val_samples)?)
    };
    let (m, h) = train(&config.network, &train_set, val_set.as_ref(), &tc)?;
    Ok((Trained::Single(m), History::Single(h)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    /// Manifest file name inside the output directory.
    pub manifest: PathBuf,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub history: History,
    pub validation: Option<MetricsReport>,
}

/// Splits off a validation set, trains, and writes the model, `history.json` and `run.json`.
pub fn run_train(config: &ExperimentConfig) -> Result<TrainReport> {
    config.write_run_file()?;
    let samples = load_samples(config)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (train_ids, val_ids) = split_train_val(&ids, config.val_fraction, config.seed)?;
    let train_s = select(&samples, &train_ids);
    let val_s = select(&samples, &val_ids);
    let (trained, history) = fit(config, &train_s, &val_s, config.seed)?;
    let manifest = trained.save(&config.output_dir)?;
    let manifest = PathBuf::from(manifest.file_name().expect("manifest file"));
    let validation = if val_s.is_empty() {
        None
    } else {
        Some(evaluate_dataset(trained.segmenter(), &val_s)?)
    };
    let report = TrainReport {
        config_hash: config.hash(),
        manifest,
        train_ids,
        val_ids,
        history,
        validation,
    };
    write_json(&config.output_dir.join("train_report.json"), &report)?;
    Ok(report)
}

/// Loads a model manifest, a cascade manifest, or a bare checkpoint paired with `network`.
pub fn load_trained(path: &Path, network: &NetworkConfig) -> Result<Trained> {
    let base = path.parent().unwrap_or(Path::new("."));
    if path.extension().and_then(|e| e.to_str()) != Some("json") {
        return Ok(Trained::Single(Model::new(network.clone(), load_checkpoint(path)?)?));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    if value.get("stage1").is_some() {
        let m: CascadeManifest = serde_json::from_value(value)?;
        Ok(Trained::Cascade(m.load(base)?))
    } else {
        let m: ModelManifest = serde_json::from_value(value)?;
        Ok(Trained::Single(m.load(base)?))
    }
}

/// Scores a saved model on the configured dataset; writes `metrics.json` and `metrics.csv`.
pub fn run_eval(config: &ExperimentConfig, model_path: &Path) -> Result<MetricsReport> {
    config.write_run_file()?;
    let trained = load_trained(model_path, &config.network)?;
    let samples = load_samples(config)?;
    let report = evaluate_dataset(trained.segmenter(), &samples)?;
    report.write_json(&config.output_dir.join("metrics.json"))?;
    report.write_csv(&config.output_dir.join("metrics.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub history: History,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub per_fold: Vec<FoldReport>,
    /// Arithmetic mean of the per-fold mean Dice values.
    pub mean_dice: f64,
    pub mean_miou: f64,
    pub config_hash: String,
    pub reference: Option<ReferenceTargets>,
}

/// k-fold cross-validation: each fold is tested on a model trained on the
/// others, with a validation split taken from the training folds.
pub fn run_cv(config: &ExperimentConfig) -> Result<CvReport> {
    config.write_run_file()?;
    let samples = load_samples(config)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let plan = make_folds(&ids, config.k_folds, config.seed)?;
    let mut per_fold = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let wrap = |e: Error| Error::Fold {
            fold,
            source: Box::new(e),
        };
        log::info!("fold {}/{}", fold + 1, plan.k);
        let seed = fold_seed(config.seed, fold);
        let test_ids = plan.test_ids(fold);
        let (train_ids, val_ids) =
            split_train_val(&plan.train_ids(fold), config.val_fraction, seed).map_err(wrap)?;
        let (trained, history) = fit(
            config,
            &select(&samples, &train_ids),
            &select(&samples, &val_ids),
            seed,
        )
        .map_err(wrap)?;
        trained
            .save(&config.output_dir.join(format!("fold_{fold}")))
            .map_err(wrap)?;
        let metrics =
            evaluate_dataset(trained.segmenter(), &select(&samples, &test_ids)).map_err(wrap)?;
        per_fold.push(FoldReport {
            fold,
            seed,
            train_ids,
            val_ids,
            test_ids,
            history,
            metrics,
        });
    }
    let k = per_fold.len() as f64;
    let report = CvReport {
        mean_dice: per_fold.iter().map(|f| f.metrics.aggregate.mean_dice).sum::<f64>() / k,
        mean_miou: per_fold.iter().map(|f| f.metrics.aggregate.mean_miou).sum::<f64>() / k,
        per_fold,
        config_hash: config.hash(),
        reference: config.reference.clone(),
    };
    write_json(&config.output_dir.join(CV_REPORT_FILE), &report)?;
    Ok(report)
}

/// 8-bit probability map, `round(255·p)`.
pub fn quantize(p: &Grid<f32>) -> Grid<u8> {
    let data = p
        .data()
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    Grid::new(p.height(), p.width(), data).expect("same dims")
}

/// Segments one image; writes `<out>_prob.png` and `<out>_mask.png` (0 or 255).
pub fn run_predict(
    model_path: &Path,
    network: &NetworkConfig,
    image_path: &Path,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let trained = load_trained(model_path, network)?;
    let image = read_image(image_path)?;
    let (h, w) = image.dims();
    if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Data(format!(
            "{}: size {h}x{w} must be divisible by {SPATIAL_MULTIPLE}",
            image_path.display()
        )));
    }
    let expected = trained.segmenter().input_size();
    if (h, w) != expected {
        return Err(Error::Data(format!(
            "{}: size {h}x{w} does not match the network input {}x{}",
            image_path.display(),
            expected.0,
            expected.1
        )));
    }
    let p = trained.segmenter().predict_image(&image)?;
    let mask = binarize(&p, DEFAULT_THRESHOLD);
    let mask = Grid::new(h, w, mask.data().iter().map(|&m| m * 255).collect())?;
    let with_suffix = |suffix: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let (prob_path, mask_path) = (with_suffix("_prob.png"), with_suffix("_mask.png"));
    if let Some(dir) = prob_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_png(&prob_path, &quantize(&p))?;
    write_png(&mask_path, &mask)?;
    Ok((prob_path, mask_path))
}

/// Writes the configured synthetic dataset to `out` in the on-disk dataset layout.
pub fn run_synth(config: &ExperimentConfig, out: &Path) -> Result<usize> {
    let size = config.data.synth.size.unwrap_or(config.network.input_size.0);
    let samples = synth_dataset(config.data.synth.n, size, config.seed)?;
    save_dataset(out, &samples)?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_materialized() {
        let c = ExperimentConfig::load(None, None, &[]).unwrap();
        assert_eq!(c.k_folds, 5);
        assert_eq!(c.data.synth.size, Some(256));
        assert_eq!(c.train.epochs, 300);
        let again: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again.resolved().unwrap(), c);
    }

    #[test]
    fn overrides_and_env_seed() {
        let c = ExperimentConfig::load(
            None,
            Some("42"),
            &ov(&[
                ("train.epochs", "2"),
                ("network.input_size", "[64,64]"),
                ("network.scale_inputs", "[0.5, 0.25]"),
                ("output_dir", "out/x"),
            ]),
        )
        .unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.epochs), (42, 42, 2));
        assert_eq!(c.network.scale_inputs.len(), 2);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert_eq!(c.data.synth.size, Some(64));
        let flag_wins = ExperimentConfig::load(None, Some("42"), &ov(&[("seed", "7")])).unwrap();
        assert_eq!(flag_wins.seed, 7);
    }

    #[test]
    fn bad_overrides_rejected() {
        for pairs in [
            [("train.epoch", "2")],
            [("train.epochs", "0")],
            [("network.input_size", "[60,60]")],
            [("train.epochs.x", "1")],
        ] {
            assert!(ExperimentConfig::load(None, None, &ov(&pairs)).is_err(), "{pairs:?}");
        }
        assert!(ExperimentConfig::load(None, Some("abc"), &[]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default().resolved().unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn quantize_rounds() {
        let p = Grid::new(1, 4, vec![0.0f32, 0.5, 0.998, 1.0]).unwrap();
        assert_eq!(quantize(&p).data(), &[0, 128, 254, 255]);
    }
}
