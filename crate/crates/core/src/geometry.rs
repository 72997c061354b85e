//! Multi-scale anchors, IoU and scale-separated non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: u32 = 448;
pub const DEFAULT_SCALES: [f64; 2] = [96.0, 192.0];
pub const DEFAULT_STRIDES: [u32; 2] = [32, 64];
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.25;
pub const DEFAULT_KEEP_PER_SCALE: usize = 2;

/// Axis-aligned region in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub scale_index: usize,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, scale_index: usize, score: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            scale_index,
            score,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && self.score.is_finite()
    }
}

/// Anchor layout: one square (for ratio 1) box per grid cell per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub image_size: u32,
    pub scales: Vec<f64>,
    pub strides: Vec<u32>,
    /// Width over height. Boxes keep the area of a `scale × scale` square.
    pub aspect_ratio: f64,
    pub clip: bool,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            scales: DEFAULT_SCALES.to_vec(),
            strides: DEFAULT_STRIDES.to_vec(),
            aspect_ratio: 1.0,
            clip: true,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.scales.is_empty() {
            return Err(Error::config("scales", "at least one scale is required"));
        }
        if self.strides.len() != self.scales.len() {
            return Err(Error::config(
                "strides",
                format!(
                    "{} strides given for {} scales",
                    self.strides.len(),
                    self.scales.len()
                ),
            ));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("scales", "scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("scales", "scales must be strictly increasing"));
        }
        for &stride in &self.strides {
            if stride == 0 {
                return Err(Error::config("strides", "stride must be positive"));
            }
            if stride > self.image_size {
                return Err(Error::config(
                    "strides",
                    format!(
                        "stride {stride} exceeds image size {} (no grid centers)",
                        self.image_size
                    ),
                ));
            }
        }
        if !(self.aspect_ratio.is_finite() && self.aspect_ratio > 0.0) {
            return Err(Error::config("aspect_ratio", "must be positive"));
        }
        Ok(())
    }

    /// Number of grid centers along one axis for `stride`.
    pub fn cells_per_side(&self, stride: u32) -> usize {
        // centers at (i + 0.5) * stride strictly inside the image
        let size = f64::from(self.image_size);
        let t = f64::from(stride);
        (0..).take_while(|&i| (i as f64 + 0.5) * t < size).count()
    }
}

/// Emits anchors ordered by (scale, row, column) with zero scores.
pub fn generate_anchors(spec: &AnchorSpec) -> Result<Vec<BoundingBox>> {
    spec.validate()?;
    let size = f64::from(spec.image_size);
    let ratio_sqrt = spec.aspect_ratio.sqrt();
    let mut out = Vec::new();
    for (scale_index, (&side, &stride)) in spec.scales.iter().zip(&spec.strides).enumerate() {
        let n = spec.cells_per_side(stride);
        let t = f64::from(stride);
        let half_w = side * ratio_sqrt / 2.0;
        let half_h = side / ratio_sqrt / 2.0;
        for row in 0..n {
            let cy = (row as f64 + 0.5) * t;
            for col in 0..n {
                let cx = (col as f64 + 0.5) * t;
                let mut b =
                    BoundingBox::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h, scale_index, 0.0);
                if spec.clip {
                    b.x1 = b.x1.max(0.0);
                    b.y1 = b.y1.max(0.0);
                    b.x2 = b.x2.min(size);
                    b.y2 = b.y2.min(size);
                }
                out.push(b);
            }
        }
    }
    Ok(out)
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn check_nms_args(iou_threshold: f64, keep_per_scale: usize) -> Result<()> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::config(
            "iou_threshold",
            format!("{iou_threshold} not in (0, 1]"),
        ));
    }
    if keep_per_scale == 0 {
        return Err(Error::config("keep_per_scale", "must be at least 1"));
    }
    Ok(())
}

/// Greedy NMS within each scale. Returns input indices of the survivors,
/// ordered by (scale, descending score).
///
/// Equal scores keep their input order, so anchors from [`generate_anchors`]
/// tie-break on row-major index. A box is suppressed only when its IoU with a
/// kept box is strictly greater than `iou_threshold`.
pub fn scale_separated_nms_indices(
    boxes: &[BoundingBox],
    iou_threshold: f64,
    keep_per_scale: usize,
) -> Result<Vec<usize>> {
    check_nms_args(iou_threshold, keep_per_scale)?;
    if let Some(bad) = boxes.iter().position(|b| !b.is_valid()) {
        return Err(Error::config(
            "boxes",
            format!("box {bad} has non-positive area or non-finite score"),
        ));
    }

    let num_scales = boxes.iter().map(|b| b.scale_index + 1).max().unwrap_or(0);
    let mut by_scale: Vec<Vec<usize>> = vec![Vec::new(); num_scales];
    for (i, b) in boxes.iter().enumerate() {
        by_scale[b.scale_index].push(i);
    }

    let mut out = Vec::new();
    for mut members in by_scale {
        // stable: equal scores keep input order
        members.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
        let mut kept: Vec<usize> = Vec::with_capacity(keep_per_scale);
        for idx in members {
            if kept.len() == keep_per_scale {
                break;
            }
            let suppressed = kept
                .iter()
                .any(|&k| iou(&boxes[k], &boxes[idx]) > iou_threshold);
            if !suppressed {
                kept.push(idx);
            }
        }
        out.extend(kept);
    }
    Ok(out)
}

pub fn scale_separated_nms(
    boxes: &[BoundingBox],
    iou_threshold: f64,
    keep_per_scale: usize,
) -> Result<Vec<BoundingBox>> {
    Ok(scale_separated_nms_indices(boxes, iou_threshold, keep_per_scale)?
        .into_iter()
        .map(|i| boxes[i])
        .collect())
}

/// JSONL wire form of a scored box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: String,
    pub scale: usize,
    #[serde(rename = "box")]
    pub coords: [f64; 4],
    pub score: f64,
}

impl BoxRecord {
    pub fn from_box(id: impl Into<String>, b: &BoundingBox) -> Self {
        Self {
            id: id.into(),
            scale: b.scale_index,
            coords: [b.x1, b.y1, b.x2, b.y2],
            score: b.score,
        }
    }

    pub fn to_box(&self) -> BoundingBox {
        let [x1, y1, x2, y2] = self.coords;
        BoundingBox::new(x1, y1, x2, y2, self.scale, self.score)
    }
}
