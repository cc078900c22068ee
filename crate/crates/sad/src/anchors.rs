//! Anchor grid, ground-truth assignment and box-delta coding.

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, Box2D};
use crate::scene::GroundTruthBox;
use serde::{Deserialize, Serialize};

/// Log-size deltas are clamped here when decoding, so a wild regression
/// output cannot produce an astronomically large box.
const LOG_SIZE_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Square anchor side lengths per cell, one slot per scale.
    pub scales: Vec<f64>,
    /// IoU at or above which an anchor is positive.
    pub pos_iou: f64,
    /// IoU below which an anchor is negative; in between it is ignored.
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![2.0, 3.0, 4.5],
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::config("anchor scales must be positive"));
        }
        if !(0.0..=1.0).contains(&self.neg_iou)
            || !(0.0..=1.0).contains(&self.pos_iou)
            || self.neg_iou > self.pos_iou
        {
            return Err(Error::config(
                "need 0 <= neg_iou <= pos_iou <= 1 for anchor assignment",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn as_box(&self) -> Box2D {
        Box2D::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Dense anchor set over an H x W cell grid: one anchor per (cell, scale),
/// indexed row-major over cells, then by slot.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
    height: usize,
    width: usize,
    per_cell: usize,
}

impl AnchorSet {
    pub fn generate(height: usize, width: usize, config: &AnchorConfig) -> Result<Self> {
        config.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::config("anchor grid must be non-empty"));
        }
        let per_cell = config.scales.len();
        let mut anchors = Vec::with_capacity(height * width * per_cell);
        for y in 0..height {
            for x in 0..width {
                for &s in &config.scales {
                    anchors.push(Anchor {
                        cx: x as f64 + 0.5,
                        cy: y as f64 + 0.5,
                        w: s,
                        h: s,
                    });
                }
            }
        }
        Ok(AnchorSet {
            anchors,
            height,
            width,
            per_cell,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_cell(&self) -> usize {
        self.per_cell
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, index: usize) -> &Anchor {
        &self.anchors[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStatus {
    Positive { gt_index: usize, class_id: usize },
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct AssignmentMap {
    statuses: Vec<AnchorStatus>,
    positive_count: usize,
}

impl AssignmentMap {
    pub fn status(&self, anchor_index: usize) -> AnchorStatus {
        self.statuses[anchor_index]
    }

    pub fn statuses(&self) -> &[AnchorStatus] {
        &self.statuses
    }

    pub fn positive_count(&self) -> usize {
        self.positive_count
    }
}

/// Assign every anchor a status against the ground truth. Anchors take
/// their best-IoU box (ties to the lower box index); each box with any
/// nonzero-IoU anchor is guaranteed at least one positive through
/// best-anchor forcing, ties broken by the lowest anchor index.
pub fn assign_anchors(
    anchors: &AnchorSet,
    gts: &[GroundTruthBox],
    t_pos: f64,
    t_neg: f64,
) -> Result<AssignmentMap> {
    if !(0.0..=1.0).contains(&t_neg) || !(0.0..=1.0).contains(&t_pos) || t_neg > t_pos {
        return Err(Error::invalid("need 0 <= t_neg <= t_pos <= 1"));
    }
    let n = anchors.len();
    if gts.is_empty() {
        return Ok(AssignmentMap {
            statuses: vec![AnchorStatus::Negative; n],
            positive_count: 0,
        });
    }
    for gt in gts {
        if !gt.rect().is_valid() {
            return Err(Error::invalid(format!("degenerate ground-truth box {gt:?}")));
        }
    }

    let mut statuses = vec![AnchorStatus::Negative; n];
    // best anchor per gt: (iou, anchor index)
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        let abox = anchor.as_box();
        let mut best_iou = 0.0;
        let mut best_gt = usize::MAX;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou_unchecked(&abox, &gt.rect());
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
            let slot = &mut best_for_gt[gi];
            if v > slot.0 {
                *slot = (v, ai);
            }
        }
        statuses[ai] = if best_iou >= t_pos {
            AnchorStatus::Positive {
                gt_index: best_gt,
                class_id: gts[best_gt].class_id,
            }
        } else if best_iou >= t_neg {
            AnchorStatus::Ignore
        } else {
            AnchorStatus::Negative
        };
    }

    // Best-anchor forcing: every gt overlapped by anything gets a positive.
    for (gi, gt) in gts.iter().enumerate() {
        let already = statuses.iter().any(
            |s| matches!(s, AnchorStatus::Positive { gt_index, .. } if *gt_index == gi),
        );
        if already || best_for_gt[gi].0 <= 0.0 {
            continue;
        }
        let preferred = best_for_gt[gi].1;
        if !matches!(statuses[preferred], AnchorStatus::Positive { .. }) {
            statuses[preferred] = AnchorStatus::Positive {
                gt_index: gi,
                class_id: gt.class_id,
            };
            continue;
        }
        // The best anchor is already claimed by another box; fall back to
        // the next-best unclaimed anchor with nonzero overlap.
        let gbox = gt.rect();
        let mut fallback: Option<(f64, usize)> = None;
        for (ai, anchor) in anchors.iter().enumerate() {
            if matches!(statuses[ai], AnchorStatus::Positive { .. }) {
                continue;
            }
            let v = iou_unchecked(&anchor.as_box(), &gbox);
            if v > 0.0 && fallback.map_or(true, |(bv, _)| v > bv) {
                fallback = Some((v, ai));
            }
        }
        if let Some((_, ai)) = fallback {
            statuses[ai] = AnchorStatus::Positive {
                gt_index: gi,
                class_id: gt.class_id,
            };
        }
    }

    let positive_count = statuses
        .iter()
        .filter(|s| matches!(s, AnchorStatus::Positive { .. }))
        .count();
    Ok(AssignmentMap {
        statuses,
        positive_count,
    })
}

/// Center-offset / log-size coding of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

pub fn encode_box(anchor: &Anchor, gt: &Box2D) -> Result<BoxDelta> {
    if !gt.is_valid() {
        return Err(Error::invalid(format!("cannot encode degenerate box {gt:?}")));
    }
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::invalid("anchor has non-positive size"));
    }
    let (gx, gy) = gt.center();
    Ok(BoxDelta {
        dx: (gx - anchor.cx) / anchor.w,
        dy: (gy - anchor.cy) / anchor.h,
        dw: (gt.width() / anchor.w).ln(),
        dh: (gt.height() / anchor.h).ln(),
    })
}

pub fn decode_box(anchor: &Anchor, delta: &BoxDelta) -> Result<Box2D> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::invalid("anchor has non-positive size"));
    }
    let cx = anchor.cx + delta.dx * anchor.w;
    let cy = anchor.cy + delta.dy * anchor.h;
    let w = anchor.w * delta.dw.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    let h = anchor.h * delta.dh.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    Ok(Box2D::from_center(cx, cy, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GroundTruthBox;

    fn gt(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruthBox {
        GroundTruthBox {
            class_id,
            x1,
            y1,
            x2,
            y2,
        }
    }

    #[test]
    fn anchor_set_layout() {
        let set = AnchorSet::generate(4, 5, &AnchorConfig::default()).unwrap();
        assert_eq!(set.len(), 4 * 5 * 3);
        // row-major then slot: anchor 0 is cell (0,0) scale 2, anchor 3 is cell (0,1)
        assert_eq!(set.get(0).cx, 0.5);
        assert_eq!(set.get(0).w, 2.0);
        assert_eq!(set.get(1).w, 3.0);
        assert_eq!(set.get(3).cx, 1.5);
    }

    #[test]
    fn no_gt_means_all_negative() {
        let set = AnchorSet::generate(4, 4, &AnchorConfig::default()).unwrap();
        let map = assign_anchors(&set, &[], 0.5, 0.4).unwrap();
        assert_eq!(map.positive_count(), 0);
        assert!(map
            .statuses()
            .iter()
            .all(|s| *s == AnchorStatus::Negative));
    }

    #[test]
    fn coincident_anchor_is_positive() {
        let set = AnchorSet::generate(8, 8, &AnchorConfig::default()).unwrap();
        // exactly the 3x3 anchor at cell (4,4)
        let boxes = [gt(1, 3.0, 3.0, 6.0, 6.0)];
        let map = assign_anchors(&set, &boxes, 0.5, 0.4).unwrap();
        let idx = (4 * 8 + 4) * 3 + 1;
        assert_eq!(
            map.status(idx),
            AnchorStatus::Positive {
                gt_index: 0,
                class_id: 1
            }
        );
    }

    #[test]
    fn low_iou_gt_gets_forced_positive() {
        let set = AnchorSet::generate(8, 8, &AnchorConfig::default()).unwrap();
        // 2x2 box offset so its best IoU lands in [0.4, 0.5): offset 0.5 in x
        // and 0.25 in y from the cell center.
        let b = gt(0, 3.0, 3.25, 5.0, 5.25);
        let mut best = 0.0f64;
        for a in set.iter() {
            best = best.max(iou_unchecked(&a.as_box(), &b.rect()));
        }
        assert!(best >= 0.4 && best < 0.5, "constructed best IoU {best}");
        let map = assign_anchors(&set, &[b], 0.5, 0.4).unwrap();
        assert_eq!(map.positive_count(), 1);
    }

    #[test]
    fn positives_cover_every_overlapped_gt() {
        let set = AnchorSet::generate(10, 10, &AnchorConfig::default()).unwrap();
        let boxes = [
            gt(0, 1.0, 1.0, 3.5, 3.0),
            gt(1, 5.0, 5.0, 9.0, 9.0),
            gt(2, 1.2, 6.0, 3.2, 8.4),
        ];
        let map = assign_anchors(&set, &boxes, 0.5, 0.4).unwrap();
        for gi in 0..boxes.len() {
            assert!(
                map.statuses().iter().any(
                    |s| matches!(s, AnchorStatus::Positive { gt_index, .. } if *gt_index == gi)
                ),
                "gt {gi} has no positive anchor"
            );
        }
        assert!(map.positive_count() >= boxes.len());
    }

    #[test]
    fn encode_identity_at_anchor() {
        let a = Anchor {
            cx: 5.0,
            cy: 5.0,
            w: 2.0,
            h: 2.0,
        };
        let d = encode_box(&a, &a.as_box()).unwrap();
        assert_eq!(d, BoxDelta { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 });
    }

    #[test]
    fn encode_half_cell_shift() {
        let a = Anchor {
            cx: 5.0,
            cy: 5.0,
            w: 2.0,
            h: 2.0,
        };
        let g = Box2D::from_center(6.0, 5.0, 2.0, 2.0);
        let d = encode_box(&a, &g).unwrap();
        assert!((d.dx - 0.5).abs() < 1e-12);
        assert_eq!(d.dy, 0.0);
        assert_eq!(d.dw, 0.0);
        assert_eq!(d.dh, 0.0);
    }

    #[test]
    fn roundtrip_within_tolerance() {
        let a = Anchor {
            cx: 3.5,
            cy: 7.5,
            w: 3.0,
            h: 3.0,
        };
        for (bx, by, bw, bh) in [
            (2.0, 6.0, 2.5, 4.0),
            (3.6, 7.2, 0.7, 1.3),
            (1.0, 1.0, 9.0, 8.0),
        ] {
            let g = Box2D::from_center(bx, by, bw, bh);
            let d = encode_box(&a, &g).unwrap();
            let back = decode_box(&a, &d).unwrap();
            assert!((back.x1 - g.x1).abs() < 1e-9);
            assert!((back.y1 - g.y1).abs() < 1e-9);
            assert!((back.x2 - g.x2).abs() < 1e-9);
            assert!((back.y2 - g.y2).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_rejects_degenerate() {
        let a = Anchor {
            cx: 0.0,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
        };
        let g = Box2D::new(1.0, 1.0, 1.0, 2.0);
        assert!(encode_box(&a, &g).is_err());
    }
}
