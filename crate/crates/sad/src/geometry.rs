//! Axis-aligned boxes in cell units.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Box2D { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2D {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 < self.x2
            && self.y1 < self.y2
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

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &Box2D, b: &Box2D) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid(format!("degenerate box in iou: {a:?} vs {b:?}")));
    }
    Ok(iou_unchecked(a, b))
}

/// IoU without validity checks, for hot loops over already-validated boxes.
pub fn iou_unchecked(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_and_disjoint() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Box2D::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_one_third() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::new(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = Box2D::new(0.0, 0.0, 0.0, 2.0);
        let b = Box2D::new(0.0, 0.0, 1.0, 1.0);
        assert!(iou(&a, &b).is_err());
    }
}
