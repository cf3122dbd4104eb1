//! Boxes, IoU, anchor grids and box/delta coding.
//!
//! Boxes are closed intervals in pixel coordinates: `width = x_max - x_min`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_max >= self.x_min && self.y_max >= self.y_min
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

/// A ground-truth face. Ignored faces (WIDER `invalid=1`) neither count as
/// positives nor as background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub ignored: bool,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        Self { bbox, ignored: false }
    }

    pub fn ignored(bbox: BBox) -> Self {
        Self { bbox, ignored: true }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub stride: usize,
    pub sizes: Vec<usize>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            sizes: vec![16, 32, 64],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(invalid("anchor stride must be positive"));
        }
        if self.sizes.is_empty() {
            return Err(invalid("at least one anchor size is required"));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("anchor sizes must be strictly increasing"));
        }
        if self.sizes.iter().any(|&s| s == 0 || s % self.stride != 0) {
            return Err(invalid("anchor sizes must be positive multiples of the stride"));
        }
        Ok(())
    }

    /// Dilation rate used by the head branch serving each anchor size.
    pub fn dilations(&self) -> Vec<usize> {
        let base = self.sizes[0];
        self.sizes.iter().map(|&s| (s / base).max(1)).collect()
    }
}

/// Anchors tiled over the stride-8 detection grid, indexed by
/// `(size_idx, row, col)` with `size_idx` slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub config: AnchorConfig,
    pub feat_h: usize,
    pub feat_w: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn index(&self, size_idx: usize, row: usize, col: usize) -> usize {
        (size_idx * self.feat_h + row) * self.feat_w + col
    }

    /// Inverse of [`AnchorGrid::index`].
    pub fn position(&self, anchor: usize) -> (usize, usize, usize) {
        let cells = self.cells();
        let k = anchor / cells;
        let rem = anchor % cells;
        (k, rem / self.feat_w, rem % self.feat_w)
    }
}

pub fn generate_anchors(image_h: usize, image_w: usize, config: &AnchorConfig) -> Result<AnchorGrid> {
    config.validate()?;
    if image_h == 0 || image_w == 0 {
        return Err(invalid(format!(
            "image dimensions must be positive, got {image_h}x{image_w}"
        )));
    }
    let stride = config.stride;
    let feat_h = image_h.div_ceil(stride);
    let feat_w = image_w.div_ceil(stride);
    let mut boxes = Vec::with_capacity(config.sizes.len() * feat_h * feat_w);
    for &size in &config.sizes {
        let size = size as f64;
        for i in 0..feat_h {
            let cy = (i as f64 + 0.5) * stride as f64;
            for j in 0..feat_w {
                let cx = (j as f64 + 0.5) * stride as f64;
                boxes.push(BBox::from_center(cx, cy, size, size));
            }
        }
    }
    Ok(AnchorGrid {
        config: config.clone(),
        feat_h,
        feat_w,
        boxes,
    })
}

/// Regression target relative to an anchor: center offsets normalized by the
/// anchor size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Delta {
    pub const fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<Delta> {
    if !anchor.has_positive_area() || !gt.has_positive_area() {
        return Err(invalid("cannot encode a zero-area box"));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(Delta {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

pub fn decode(anchor: &BBox, d: &Delta) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + d.tx * aw;
    let cy = acy + d.ty * ah;
    BBox::from_center(cx, cy, aw * d.tw.exp(), ah * d.th.exp())
}

pub fn clip_box(b: &BBox, image_h: usize, image_w: usize) -> BBox {
    let (w, h) = (image_w as f64, image_h as f64);
    let x_min = b.x_min.clamp(0.0, w);
    let y_min = b.y_min.clamp(0.0, h);
    BBox::new(
        x_min,
        y_min,
        b.x_max.clamp(0.0, w).max(x_min),
        b.y_max.clamp(0.0, h).max(y_min),
    )
}

pub fn flip_box(b: &BBox, image_w: usize) -> BBox {
    let w = image_w as f64;
    BBox::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max)
}
