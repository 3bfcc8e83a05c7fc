//! Dataset ingestion, synthetic fixtures and cross-validation planning.
//!
//! On disk a dataset is a directory of paired 8-bit grayscale PNGs:
//!
//! ```text
//! <root>/images/<id>.png
//! <root>/masks/<id>.png
//! <root>/meta.csv        (optional: id,direction,tumor_type)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resize::{axis_taps, resample_plane, ScaleFactor};
use crate::tensor::Tensor4;

/// Spatial dims must be multiples of this (five stride-2 stages).
pub const SPATIAL_MULTIPLE: usize = 32;

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Axial,
    Coronal,
    Sagittal,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TumorType {
    Glioma,
    Meningioma,
    Pituitary,
    #[default]
    Unknown,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "axial" => Direction::Axial,
            "coronal" => Direction::Coronal,
            "sagittal" => Direction::Sagittal,
            "" | "unknown" => Direction::Unknown,
            other => return Err(Error::Data(format!("unknown direction '{other}'"))),
        })
    }
}

impl FromStr for TumorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "glioma" => TumorType::Glioma,
            "meningioma" => TumorType::Meningioma,
            "pituitary" => TumorType::Pituitary,
            "" | "unknown" => TumorType::Unknown,
            other => return Err(Error::Data(format!("unknown tumor type '{other}'"))),
        })
    }
}

impl Direction {
    fn as_str(self) -> &'static str {
        match self {
            Direction::Axial => "axial",
            Direction::Coronal => "coronal",
            Direction::Sagittal => "sagittal",
            Direction::Unknown => "unknown",
        }
    }
}

impl TumorType {
    fn as_str(self) -> &'static str {
        match self {
            TumorType::Glioma => "glioma",
            TumorType::Meningioma => "meningioma",
            TumorType::Pituitary => "pituitary",
            TumorType::Unknown => "unknown",
        }
    }
}

/// One grayscale image with its binary ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Intensities in `[0, 1]`.
    pub image: Grid<f32>,
    /// Exactly 0 or 1 per pixel.
    pub mask: Grid<u8>,
    pub direction: Direction,
    pub tumor_type: TumorType,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Grid<f32>, mask: Grid<u8>) -> Result<Self> {
        let sample = ImageSample {
            id: id.into(),
            image,
            mask,
            direction: Direction::Unknown,
            tumor_type: TumorType::Unknown,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.dims() != self.mask.dims() {
            return Err(Error::Data(format!(
                "{}: image is {:?} but mask is {:?}",
                self.id,
                self.image.dims(),
                self.mask.dims()
            )));
        }
        check_spatial(&self.id, self.image.dims())?;
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("{}: image value {v} outside [0,1]", self.id)));
        }
        if let Some(v) = self.mask.data().iter().find(|v| **v > 1) {
            return Err(Error::Data(format!("{}: mask value {v} is not binary", self.id)));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.data().iter().filter(|v| **v == 1).count();
        fg as f64 / self.mask.data().len() as f64
    }

    /// Downsamples image (bilinear) and mask (bilinear, re-binarized at 0.5).
    pub fn downscaled(&self, factor: ScaleFactor) -> Result<Self> {
        let image = resize_bilinear(&self.image, factor)?;
        let mask_f = Grid::new(
            self.mask.height(),
            self.mask.width(),
            self.mask.data().iter().map(|&v| v as f32).collect(),
        )?;
        let mask_r = resize_bilinear(&mask_f, factor)?;
        let mask = Grid::new(
            mask_r.height(),
            mask_r.width(),
            mask_r.data().iter().map(|&v| u8::from(v >= 0.5)).collect(),
        )?;
        Ok(ImageSample {
            image,
            mask,
            ..self.clone()
        })
    }
}

fn check_spatial(id: &str, (h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Data(format!(
            "{id}: size {h}x{w} is not divisible by {SPATIAL_MULTIPLE}; resize the data so both \
             dimensions are multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Stacks sample images into an `(n, 1, h, w)` batch.
pub fn image_batch(samples: &[&ImageSample]) -> Result<Tensor4<f32>> {
    let (h, w) = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .dims();
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "{}: size {:?} differs from batch size {:?}",
                s.id,
                s.dims(),
                (h, w)
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor4::from_vec([samples.len(), 1, h, w], data)
}

/// Bilinear downsampling by one of the supported scale factors.
pub fn resize_bilinear(image: &Grid<f32>, factor: ScaleFactor) -> Result<Grid<f32>> {
    let dst_h = factor.target_len(image.height())?;
    let dst_w = factor.target_len(image.width())?;
    let rows = axis_taps(image.height(), dst_h);
    let cols = axis_taps(image.width(), dst_w);
    let mut out = vec![0.0f32; dst_h * dst_w];
    resample_plane(image.data(), image.width(), &rows, &cols, &mut out);
    Grid::new(dst_h, dst_w, out)
}

fn read_png(path: &Path) -> Result<Grid<u8>> {
    let png_err = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!(
            "expected 8-bit single-channel grayscale, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        pixels.extend_from_slice(&row[..w]);
    }
    Grid::new(h, w, pixels)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_png(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let png_err = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        grid.width() as u32,
        grid.height() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_err(e.to_string()))?;
    writer
        .write_image_data(grid.data())
        .map_err(|e| png_err(e.to_string()))?;
    writer.finish().map_err(|e| png_err(e.to_string()))
}

/// Reads a grayscale PNG as intensities in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Grid<f32>> {
    let raw = read_png(path)?;
    let (h, w) = raw.dims();
    Grid::new(h, w, raw.data().iter().map(|&p| p as f32 / 255.0).collect())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize, Serialize)]
struct MetaRow {
    id: String,
    direction: String,
    tumor_type: String,
}

/// Loads every image/mask pair under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    for id in images.keys() {
        if !masks.contains_key(id) {
            return Err(Error::Data(format!("image '{id}' has no matching mask")));
        }
    }
    for id in masks.keys().filter(|id| !images.contains_key(*id)) {
        log::warn!("mask '{id}' has no matching image; ignored");
    }

    let mut meta: HashMap<String, (Direction, TumorType)> = HashMap::new();
    let meta_path = root.join("meta.csv");
    if meta_path.exists() {
        let mut reader = csv::Reader::from_path(&meta_path)?;
        for row in reader.deserialize() {
            let row: MetaRow = row?;
            meta.insert(row.id, (row.direction.parse()?, row.tumor_type.parse()?));
        }
    }

    let mut samples = images
        .par_iter()
        .map(|(id, image_path)| {
            let raw_image = read_png(image_path)?;
            let raw_mask = read_png(&masks[id])?;
            if raw_image.dims() != raw_mask.dims() {
                return Err(Error::Data(format!(
                    "'{id}': image is {:?} but mask is {:?}",
                    raw_image.dims(),
                    raw_mask.dims()
                )));
            }
            check_spatial(id, raw_image.dims())?;
            let (h, w) = raw_image.dims();
            let image = Grid::new(
                h,
                w,
                raw_image.data().iter().map(|&p| p as f32 / 255.0).collect(),
            )?;
            let mask = Grid::new(
                h,
                w,
                raw_mask.data().iter().map(|&p| u8::from(p >= 128)).collect(),
            )?;
            let (direction, tumor_type) = meta.get(id).copied().unwrap_or_default();
            Ok(ImageSample {
                id: id.clone(),
                image,
                mask,
                direction,
                tumor_type,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// Writes samples in the on-disk layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[ImageSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let meta_path = root.join("meta.csv");
    let mut meta = csv::Writer::from_path(&meta_path)?;
    for s in samples {
        let (h, w) = s.dims();
        let image = Grid::new(
            h,
            w,
            s.image
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        )?;
        let mask = Grid::new(h, w, s.mask.data().iter().map(|&v| v * 255).collect())?;
        write_png(&root.join("images").join(format!("{}.png", s.id)), &image)?;
        write_png(&root.join("masks").join(format!("{}.png", s.id)), &mask)?;
        meta.serialize(MetaRow {
            id: s.id.clone(),
            direction: s.direction.as_str().into(),
            tumor_type: s.tumor_type.as_str().into(),
        })?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))
}

/// Deterministic k-fold assignment of sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
    pub val_fraction: f64,
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

impl FoldPlan {
    /// Ids assigned to `fold`, in id order.
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Ids outside `fold`, in id order.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for f in self.assignment.values() {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle then round-robin assignment into `k` folds.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!(
            "{} ids cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate id '{id}'")));
        }
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        assignment,
        val_fraction: DEFAULT_VAL_FRACTION,
    })
}

/// Seeded shuffle; the first `ceil(val_fraction * n)` ids become validation.
pub fn split_train_val(
    train_ids: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if train_ids.is_empty() {
        return Err(Error::Data("cannot split an empty id list".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let mut order = train_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // tolerance keeps e.g. 0.2 * 15 = 3.0000000000000004 from rounding up to 4
    let n_val = ((val_fraction * order.len() as f64) - 1e-9).ceil() as usize;
    let train = order.split_off(n_val);
    Ok((train, order))
}

const SYNTH_MIN_FG: f64 = 0.02;
const SYNTH_MAX_FG: f64 = 0.30;

/// Smooth noisy background with one bright filled ellipse; the mask is the ellipse.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    check_spatial("synthetic", (size, size))?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synth_sample(format!("synth_{i:05}"), size, &mut rng)
        })
        .collect()
}

fn synth_sample(id: String, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageSample> {
    let noise: Vec<f32> = (0..size * size).map(|_| rng.random::<f32>()).collect();
    let background = box_blur(&noise, size, 2);

    let mask = loop {
        let target = rng.random_range(0.04..0.20) * (size * size) as f64;
        let aspect = rng.random_range(0.6..1.0);
        let a = (target / (std::f64::consts::PI * aspect)).sqrt();
        let b = a * aspect;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a + 1.0;
        let cy = rng.random_range(margin..size as f64 - margin);
        let cx = rng.random_range(margin..size as f64 - margin);
        let (sin, cos) = theta.sin_cos();
        let mask: Vec<u8> = (0..size * size)
            .map(|p| {
                let y = (p / size) as f64 + 0.5 - cy;
                let x = (p % size) as f64 + 0.5 - cx;
                let u = x * cos + y * sin;
                let v = -x * sin + y * cos;
                u8::from((u / a).powi(2) + (v / b).powi(2) <= 1.0)
            })
            .collect();
        let frac = mask.iter().filter(|m| **m == 1).count() as f64 / mask.len() as f64;
        if (SYNTH_MIN_FG..=SYNTH_MAX_FG).contains(&frac) {
            break mask;
        }
    };

    let image: Vec<f32> = background
        .iter()
        .zip(&mask)
        .map(|(&bg, &m)| {
            let base = 0.1 + 0.35 * bg + 0.05 * rng.random::<f32>();
            let v = if m == 1 { base + 0.4 } else { base };
            v.clamp(0.0, 1.0)
        })
        .collect();
    ImageSample::new(id, Grid::new(size, size, image)?, Grid::new(size, size, mask)?)
}

fn box_blur(src: &[f32], size: usize, radius: usize) -> Vec<f32> {
    let pass = |input: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; input.len()];
        for r in 0..size {
            for c in 0..size {
                let (lo, hi) = {
                    let p = if horizontal { c } else { r };
                    (p.saturating_sub(radius), (p + radius).min(size - 1))
                };
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += if horizontal {
                        input[r * size + q]
                    } else {
                        input[q * size + c]
                    };
                }
                out[r * size + c] = acc / (hi - lo + 1) as f32;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:04}")).collect()
    }

    #[test]
    fn folds_of_ten_are_pairs() {
        let plan = make_folds(&ids(10), 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn folds_of_full_dataset_size() {
        let plan = make_folds(&ids(3064), 5, 11).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![613, 613, 613, 613, 612]);
    }

    #[test]
    fn folds_are_deterministic() {
        let a = make_folds(&ids(50), 5, 42).unwrap();
        let b = make_folds(&ids(50), 5, 42).unwrap();
        assert_eq!(a.assignment, b.assignment);
        let c = make_folds(&ids(50), 5, 43).unwrap();
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn folds_reject_bad_input() {
        assert!(make_folds(&ids(10), 1, 0).is_err());
        assert!(make_folds(&ids(3), 5, 0).is_err());
        let mut dup = ids(5);
        dup.push("id0001".into());
        assert!(matches!(make_folds(&dup, 2, 0), Err(Error::Data(_))));
    }

    #[test]
    fn split_sizes() {
        let (train, val) = split_train_val(&ids(10), 0.2, 1).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let (_, val) = split_train_val(&ids(2451), 0.2, 1).unwrap();
        assert_eq!(val.len(), 491);
        let (_, val) = split_train_val(&ids(15), 0.2, 1).unwrap();
        assert_eq!(val.len(), 3);
    }

    #[test]
    fn split_partitions_input() {
        let input = ids(37);
        let (train, val) = split_train_val(&input, 0.2, 9).unwrap();
        let t: BTreeSet<_> = train.iter().collect();
        let v: BTreeSet<_> = val.iter().collect();
        assert!(t.is_disjoint(&v));
        let union: BTreeSet<_> = t.union(&v).cloned().collect();
        assert_eq!(union, input.iter().collect());
    }

    #[test]
    fn split_rejects_empty_and_bad_fraction() {
        assert!(split_train_val(&[], 0.2, 0).is_err());
        assert!(split_train_val(&ids(4), 0.0, 0).is_err());
        assert!(split_train_val(&ids(4), 1.0, 0).is_err());
    }

    #[test]
    fn resize_constant_and_shape() {
        let g = Grid::filled(512, 512, 0.37f32);
        let r = resize_bilinear(&g, ScaleFactor::Half).unwrap();
        assert_eq!(r.dims(), (256, 256));
        assert!(r.data().iter().all(|&v| v == 0.37));
        for f in ScaleFactor::ALL {
            let r = resize_bilinear(&Grid::filled(64, 32, 0.9f32), f).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.9));
        }
    }

    #[test]
    fn resize_ramp_matches_direct_evaluation() {
        // 4x4 ramp v = 4r + c; with factor 1/2 every output samples at
        // source coordinate 2i + 0.5, i.e. the mean of a 2x2 block.
        let g = Grid::new(4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        let r = resize_bilinear(&g, ScaleFactor::Half).unwrap();
        let expected = [2.5f32, 4.5, 10.5, 12.5];
        assert_eq!(r.data(), &expected);
    }

    #[test]
    fn resize_rejects_non_integral_target() {
        let g = Grid::filled(12, 12, 0.0f32);
        assert!(resize_bilinear(&g, ScaleFactor::Eighth).is_err());
    }

    #[test]
    fn synth_contract() {
        let a = synth_dataset(8, 64, 7).unwrap();
        assert_eq!(a.len(), 8);
        for s in &a {
            assert_eq!(s.dims(), (64, 64));
            assert!(s.mask.data().contains(&1));
        }
        let b = synth_dataset(8, 64, 7).unwrap();
        assert_eq!(a, b);
        assert!(synth_dataset(1, 48, 0).is_err());
    }

    #[test]
    fn synth_foreground_fraction_bounds() {
        for seed in 0..100 {
            let s = synth_dataset(1, 64, seed).unwrap();
            let f = s[0].foreground_fraction();
            assert!((SYNTH_MIN_FG..=SYNTH_MAX_FG).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn sample_validation() {
        let img = Grid::filled(32, 32, 0.5f32);
        let bad_mask = Grid::filled(32, 32, 2u8);
        assert!(ImageSample::new("x", img.clone(), bad_mask).is_err());
        let small = Grid::filled(16, 16, 0u8);
        assert!(ImageSample::new("x", img, small).is_err());
    }
}
