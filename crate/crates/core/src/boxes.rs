//! Axis-aligned boxes in normalized image coordinates, detections, and
//! ground-truth annotations.

use serde::{Deserialize, Serialize};

/// Corner-form box, `x1 <= x2`, `y1 <= y2`, coordinates normalized to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// One decoded prediction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// One annotated object; center/size normalized to (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn bbox(&self) -> BBox {
        BBox::from_cxcywh(self.cx, self.cy, self.w, self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx - self.w / 2.0 >= -1e-9
            && self.cy - self.h / 2.0 >= -1e-9
            && self.cx + self.w / 2.0 <= 1.0 + 1e-9
            && self.cy + self.h / 2.0 <= 1.0 + 1e-9
    }
}
