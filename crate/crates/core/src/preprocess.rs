//! Segmentation chain turning a raw depth image into the network input:
//! depth threshold, anchor-line masking, crop and area resize, normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::DepthImage;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("anchors coincide at ({0:.2}, {1:.2})")]
    CoincidentAnchors(f64, f64),
    #[error("invalid preprocess spec: {0}")]
    InvalidSpec(String),
}

/// Pixel rectangle `[u0, u0 + width) x [v0, v0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRect {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub z_min: f64,
    pub z_max: f64,
    /// Mask margin, in pixels, above the anchor line.
    pub line_offset: f64,
    pub crop: CropRect,
    pub out_size: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            z_min: 0.9,
            z_max: 1.9,
            line_offset: 2.0,
            crop: CropRect { u0: 20, v0: 0, width: 120, height: 120 },
            out_size: 64,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self, raw_width: usize, raw_height: usize) -> Result<(), PreprocessError> {
        let bad = |m: &str| Err(PreprocessError::InvalidSpec(m.to_string()));
        if !(self.z_min < self.z_max) {
            return bad("z_min must be below z_max");
        }
        if self.out_size < 8 {
            return bad("out_size must be at least 8");
        }
        let c = &self.crop;
        if c.width == 0 || c.height == 0 || c.u0 + c.width > raw_width || c.v0 + c.height > raw_height {
            return bad("crop must lie inside the raw image");
        }
        Ok(())
    }
}

/// Keeps pixels with `z_min <= value <= z_max`, zeroes the rest.
pub fn threshold(img: &DepthImage, z_min: f64, z_max: f64) -> DepthImage {
    let data = img
        .data
        .iter()
        .map(|&v| {
            let d = f64::from(v);
            if d >= z_min && d <= z_max {
                v
            } else {
                0.0
            }
        })
        .collect();
    DepthImage { width: img.width, height: img.height, data }
}

/// Zeroes every pixel whose center lies strictly above the line through the
/// two anchors after shifting it `offset` pixels toward smaller `v`.
pub fn mask_above_line(
    img: &DepthImage,
    anchor_a: (f64, f64),
    anchor_b: (f64, f64),
    offset: f64,
) -> Result<DepthImage, PreprocessError> {
    let (mut du, mut dv) = (anchor_b.0 - anchor_a.0, anchor_b.1 - anchor_a.1);
    if du.hypot(dv) < 1e-9 {
        return Err(PreprocessError::CoincidentAnchors(anchor_a.0, anchor_a.1));
    }
    if du < 0.0 {
        du = -du;
        dv = -dv;
    }
    // normal (dv, -du) points toward decreasing v
    let (nu, nv) = (dv, -du);
    let (pu, pv) = (anchor_a.0, anchor_a.1 - offset);
    let mut out = img.clone();
    for v in 0..img.height {
        for u in 0..img.width {
            let (cu, cv) = (u as f64 + 0.5, v as f64 + 0.5);
            if nu * (cu - pu) + nv * (cv - pv) > 0.0 {
                out.set(u, v, 0.0);
            }
        }
    }
    Ok(out)
}

/// Overlap weights of source cells `[i, i+1)` with each of `out` equal bins over `[0, n)`.
fn bin_weights(n: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|i| {
                    let w = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (w > 0.0).then_some((i, w / scale))
                })
                .collect()
        })
        .collect()
}

/// Crops then area-averages down to `out_size x out_size`; invalid (zero)
/// pixels take part in the averages.
pub fn crop_resize(img: &DepthImage, crop: &CropRect, out_size: usize) -> DepthImage {
    let wu = bin_weights(crop.width, out_size);
    let wv = bin_weights(crop.height, out_size);
    // horizontal pass over the cropped rows
    let mut tmp = vec![0.0f64; crop.height * out_size];
    for r in 0..crop.height {
        let row = &img.data[(crop.v0 + r) * img.width + crop.u0..][..crop.width];
        for (o, ws) in wu.iter().enumerate() {
            tmp[r * out_size + o] = ws.iter().map(|&(i, w)| w * f64::from(row[i])).sum();
        }
    }
    let mut out = DepthImage::zeros(out_size, out_size);
    for (o, ws) in wv.iter().enumerate() {
        for c in 0..out_size {
            let s: f64 = ws.iter().map(|&(r, w)| w * tmp[r * out_size + c]).sum();
            out.data[o * out_size + c] = s as f32;
        }
    }
    out
}

/// Network input: a square single-channel grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrid {
    pub size: usize,
    pub values: Vec<f32>,
}

/// Maps valid depths linearly from `[z_min, z_max]` onto `[0, 1]` (clamped);
/// invalid pixels stay 0. Note that a depth of exactly `z_min` also maps to 0.
pub fn normalize(img: &DepthImage, z_min: f64, z_max: f64) -> InputGrid {
    debug_assert_eq!(img.width, img.height);
    let span = z_max - z_min;
    let values = img
        .data
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((f64::from(v) - z_min) / span).clamp(0.0, 1.0) as f32 })
        .collect();
    InputGrid { size: img.width, values }
}

/// threshold → mask → crop/resize → normalize.
pub fn pipeline(
    img: &DepthImage,
    anchors: [(f64, f64); 2],
    spec: &PreprocessSpec,
) -> Result<InputGrid, PreprocessError> {
    spec.validate(img.width, img.height)?;
    let t = threshold(img, spec.z_min, spec.z_max);
    let m = mask_above_line(&t, anchors[0], anchors[1], spec.line_offset)?;
    let r = crop_resize(&m, &spec.crop, spec.out_size);
    Ok(normalize(&r, spec.z_min, spec.z_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_cases() {
        let img = DepthImage { width: 4, height: 1, data: vec![3.0, 0.5, 1.0, 2.0] };
        let t = threshold(&img, 0.5, 2.0);
        assert_eq!(t.data, vec![0.0, 0.5, 1.0, 2.0]);
        assert_eq!(threshold(&t, 0.5, 2.0), t);
    }

    #[test]
    fn horizontal_anchor_line() {
        let img = DepthImage::filled(8, 20, 1.0);
        let m = mask_above_line(&img, (1.0, 10.0), (6.0, 10.0), 0.0).unwrap();
        for v in 0..20 {
            let zeroed = (0..8).all(|u| m.get(u, v) == 0.0);
            let kept = (0..8).all(|u| m.get(u, v) == 1.0);
            assert!(if v < 10 { zeroed } else { kept }, "row {v}");
        }
        let m = mask_above_line(&img, (6.0, 10.0), (1.0, 10.0), 3.0).unwrap();
        for v in 0..20 {
            assert_eq!(m.get(3, v) == 0.0, v <= 6, "row {v}");
        }
        assert_eq!(mask_above_line(&m, (6.0, 10.0), (1.0, 10.0), 3.0).unwrap(), m);
    }

    #[test]
    fn coincident_anchors_rejected() {
        let img = DepthImage::filled(4, 4, 1.0);
        assert!(matches!(mask_above_line(&img, (2.0, 2.0), (2.0, 2.0), 0.0), Err(PreprocessError::CoincidentAnchors(..))));
    }

    #[test]
    fn resize_cases() {
        let img = DepthImage::filled(30, 20, 1.25);
        let out = crop_resize(&img, &CropRect { u0: 5, v0: 2, width: 17, height: 13 }, 8);
        assert!(out.data.iter().all(|v| (v - 1.25).abs() < 1e-6));
        let img = DepthImage { width: 2, height: 2, data: vec![1.0, 1.0, 3.0, 3.0] };
        let out = crop_resize(&img, &CropRect { u0: 0, v0: 0, width: 2, height: 2 }, 1);
        assert_eq!(out.data, vec![2.0]);
    }

    #[test]
    fn normalize_cases() {
        let img = DepthImage { width: 2, height: 2, data: vec![0.5, 1.5, 0.0, 1.0] };
        let g = normalize(&img, 0.5, 1.5);
        assert_eq!(g.values, vec![0.0, 1.0, 0.0, 0.5]);
        assert!(normalize(&DepthImage::zeros(3, 3), 0.5, 1.5).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spec_validation() {
        let s = PreprocessSpec::default();
        assert!(s.validate(160, 120).is_ok());
        assert!(s.validate(100, 120).is_err());
        assert!(PreprocessSpec { z_min: 2.0, ..s }.validate(160, 120).is_err());
        assert!(PreprocessSpec { out_size: 4, ..s }.validate(160, 120).is_err());
    }

    proptest! {
        #[test]
        fn output_is_unit_interval(seed in 0u64..1000, au in 0.0..160.0f64, av in 0.0..120.0f64, bu in 0.0..160.0f64) {
            let mut img = DepthImage::zeros(160, 120);
            let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            for v in img.data.iter_mut() {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = ((x >> 40) as f32 / (1u64 << 24) as f32) * 3.0;
            }
            prop_assume!((bu - au).abs() > 1e-3);
            let spec = PreprocessSpec::default();
            let out = pipeline(&img, [(au, av), (bu, av + 3.0)], &spec).unwrap();
            prop_assert!(out.values.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(out.values.len(), 64 * 64);
        }
    }
}
