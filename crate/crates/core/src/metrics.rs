//! Hard overlap metrics on binarized predictions: Dice and two-class mean IoU.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Grid, ImageSample};
use crate::error::{Error, Result};
use crate::model::Segmenter;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// 1 where `p > threshold`, else 0.
pub fn binarize(p: &Grid<f32>, threshold: f32) -> Grid<u8> {
    Grid::new(
        p.height(),
        p.width(),
        p.data().iter().map(|&v| u8::from(v > threshold)).collect(),
    )
    .expect("same dims")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &Grid<u8>, gt: &Grid<u8>) -> Result<Confusion> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    // index = 2·pred + gt  →  [tn, fn, fp, tp]
    let mut counts = [0u64; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        counts[usize::from(p != 0) * 2 + usize::from(g != 0)] += 1;
    }
    Ok(Confusion {
        tp: counts[3],
        fp: counts[2],
        fn_: counts[1],
        tn: counts[0],
    })
}

/// `2tp / (2tp + fn + fp)`; 1 when both masks are empty.
pub fn hard_dice(c: &Confusion) -> f64 {
    let den = 2 * c.tp + c.fn_ + c.fp;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

fn iou(hit: u64, miss: u64) -> f64 {
    if hit + miss == 0 {
        1.0
    } else {
        hit as f64 / (hit + miss) as f64
    }
}

/// Foreground IoU `tp / (tp + fp + fn)`; 1 when the union is empty.
pub fn foreground_iou(c: &Confusion) -> f64 {
    iou(c.tp, c.fp + c.fn_)
}

/// Background IoU `tn / (tn + fn + fp)`; 1 when the union is empty.
pub fn background_iou(c: &Confusion) -> f64 {
    iou(c.tn, c.fp + c.fn_)
}

/// Mean of the foreground and background IoU.
pub fn mean_iou(c: &Confusion) -> f64 {
    (foreground_iou(c) + background_iou(c)) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub mean_iou: f64,
}

impl ImageMetrics {
    pub fn from_confusion(id: impl Into<String>, c: &Confusion) -> Self {
        ImageMetrics {
            id: id.into(),
            dice: hard_dice(c),
            iou_fg: foreground_iou(c),
            iou_bg: background_iou(c),
            mean_iou: mean_iou(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_dice: f64,
    pub mean_miou: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_rows(per_image: Vec<ImageMetrics>, confusion: Confusion) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_dice = per_image.iter().map(|r| r.dice).sum::<f64>() / n;
        let mean_miou = per_image.iter().map(|r| r.mean_iou).sum::<f64>() / n;
        MetricsReport {
            per_image,
            aggregate: Aggregate {
                mean_dice,
                mean_miou,
                confusion,
            },
        }
    }

    /// Scores probability maps against the samples' masks.
    pub fn from_predictions(samples: &[&ImageSample], maps: &[Grid<f32>]) -> Result<Self> {
        if samples.len() != maps.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} predictions",
                samples.len(),
                maps.len()
            )));
        }
        let mut rows = Vec::with_capacity(samples.len());
        let mut total = Confusion::default();
        for (s, p) in samples.iter().zip(maps) {
            let c = confusion(&binarize(p, DEFAULT_THRESHOLD), &s.mask)?;
            rows.push(ImageMetrics::from_confusion(&s.id, &c));
            total = total + c;
        }
        Ok(Self::from_rows(rows, total))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per image: `id,dice,iou_fg,iou_bg,mean_iou`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.per_image {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-image metrics of `model` over `samples`, plus their arithmetic means.
pub fn evaluate_dataset(model: &dyn Segmenter, samples: &[ImageSample]) -> Result<MetricsReport> {
    let refs: Vec<&ImageSample> = samples.iter().collect();
    let maps = model.predict_images(&refs)?;
    MetricsReport::from_predictions(&refs, &maps)
}
