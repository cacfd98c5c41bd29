//! Axis-aligned boxes in pixel coordinates, origin top-left.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]: max must exceed min on both axes")]
    Degenerate(f64, f64, f64, f64),
    #[error("non-finite box coordinate")]
    NonFinite,
}

/// Corner-form box. Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(BoxError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Multiplies every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    /// Divides every coordinate by `factor`. Kept separate from `scaled(1/f)`
    /// so that `b.scaled(s).unscaled(s)` reproduces `b` to rounding error.
    pub fn unscaled(&self, factor: f64) -> Self {
        Self {
            x_min: self.x_min / factor,
            y_min: self.y_min / factor,
            x_max: self.x_max / factor,
            y_max: self.y_max / factor,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Clamps to `[0, width] x [0, height]`. Returns `None` when nothing of
    /// the box is left inside the frame.
    pub fn clamped(&self, width: f64, height: f64) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.x_max > b.x_min && b.y_max > b.y_min).then_some(b)
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. 0 for disjoint boxes.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = BoxError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}
