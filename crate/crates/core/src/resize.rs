//! Bilinear downsampling by the fixed factors used for scale injection.
//!
//! Sample centres follow the half-pixel convention: output index `i` reads
//! source coordinate `(i + 0.5) / factor - 0.5`, clamped to the valid range.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleFactor {
    Half,
    Quarter,
    Eighth,
}

impl ScaleFactor {
    pub const ALL: [ScaleFactor; 3] = [ScaleFactor::Half, ScaleFactor::Quarter, ScaleFactor::Eighth];

    pub fn divisor(self) -> usize {
        match self {
            ScaleFactor::Half => 2,
            ScaleFactor::Quarter => 4,
            ScaleFactor::Eighth => 8,
        }
    }

    pub fn value(self) -> f64 {
        1.0 / self.divisor() as f64
    }

    pub fn from_value(v: f64) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| (f.value() - v).abs() < 1e-12)
            .ok_or_else(|| {
                Error::Config(format!("scale factor {v} is not one of 0.5, 0.25, 0.125"))
            })
    }

    /// Target length for a source axis, or an error when it is not integral.
    pub fn target_len(self, len: usize) -> Result<usize> {
        let d = self.divisor();
        if !len.is_multiple_of(d) || len < d {
            return Err(Error::Shape(format!(
                "length {len} cannot be scaled by 1/{d} to an integer size"
            )));
        }
        Ok(len / d)
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.divisor())
    }
}

impl Serialize for ScaleFactor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for ScaleFactor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        ScaleFactor::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Interpolation tap along one axis: `out[i] = (1 - w) * src[lo] + w * src[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

/// Taps for resampling an axis of `src_len` samples onto `dst_len` samples.
pub fn axis_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (x.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let w = if hi == lo { 0.0 } else { x - lo as f64 };
            Tap { lo, hi, w }
        })
        .collect()
}

/// Resizes a row-major `h×w` plane onto `(dst_h, dst_w)` using precomputed taps.
pub(crate) fn resample_plane<T: crate::tensor::Real>(
    src: &[T],
    src_w: usize,
    rows: &[Tap],
    cols: &[Tap],
    dst: &mut [T],
) {
    let dst_w = cols.len();
    for (i, r) in rows.iter().enumerate() {
        let wr = T::lit(r.w);
        let row_lo = &src[r.lo * src_w..(r.lo + 1) * src_w];
        let row_hi = &src[r.hi * src_w..(r.hi + 1) * src_w];
        for (j, c) in cols.iter().enumerate() {
            let wc = T::lit(c.w);
            let top = lerp(row_lo[c.lo], row_lo[c.hi], wc);
            let bottom = lerp(row_hi[c.lo], row_hi[c.hi], wc);
            dst[i * dst_w + j] = lerp(top, bottom, wr);
        }
    }
}

// Clamped so rounding can never leave the [a, b] interval.
fn lerp<T: crate::tensor::Real>(a: T, b: T, w: T) -> T {
    let v = a + (b - a) * w;
    v.max(a.min(b)).min(a.max(b))
}
