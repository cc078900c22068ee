//! Detection quality evaluation: greedy matching, 101-point interpolated
//! average precision over IoU thresholds 0.5:0.05:0.95, and report files.

use crate::error::{Error, Result};
use crate::geometry::iou_unchecked;
use crate::scene::GroundTruthBox;
use crate::teacher::{canonical_order, Detection};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
const RECALL_SAMPLES: usize = 101;

/// Greedy matching outcome for one image at one IoU threshold. Detection
/// flags are aligned with `detections`, which is the input list in
/// canonical (score-descending) order.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub detections: Vec<Detection>,
    pub det_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Match detections against ground truth, class-wise and greedy by
/// descending score; each detection takes the unmatched box of highest IoU
/// at or above the threshold, and each box is matched at most once.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> Result<MatchResult> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::invalid("matching iou threshold must be in [0, 1]"));
    }
    let mut detections = dets.to_vec();
    detections.sort_by(canonical_order);
    let mut det_tp = vec![false; detections.len()];
    let mut gt_matched = vec![false; gts.len()];
    for (di, det) in detections.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] || gt.class_id != det.class_id {
                continue;
            }
            let v = iou_unchecked(&det.rect(), &gt.rect());
            if v >= iou_thresh && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            det_tp[di] = true;
            gt_matched[gi] = true;
        }
    }
    Ok(MatchResult {
        detections,
        det_tp,
        gt_matched,
    })
}

/// 101-point interpolated AP from (score-sorted) TP flags and the number of
/// ground-truth boxes.
fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        if flag {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // precision envelope: monotone non-increasing from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut total = 0.0;
    for j in 0..RECALL_SAMPLES {
        let r = j as f64 / (RECALL_SAMPLES - 1) as f64;
        let idx = recalls.partition_point(|x| *x < r);
        if idx < precisions.len() {
            total += precisions[idx];
        }
    }
    total / RECALL_SAMPLES as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// Mean AP over the IoU thresholds; absent when the dataset holds no
    /// ground truth of this class.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrPoint {
    pub class_id: usize,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Dataset-level evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean AP over classes and IoU thresholds 0.5:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<ClassAp>,
    pub pr_curves: Vec<PrPoint>,
    pub num_images: usize,
    pub num_gt: usize,
}

/// Evaluate a dataset of per-image detections against ground truth.
pub fn evaluate_detections(
    per_image: &[(Vec<Detection>, Vec<GroundTruthBox>)],
    classes: usize,
) -> Result<EvalSummary> {
    let num_gt: usize = per_image.iter().map(|(_, g)| g.len()).sum();
    if num_gt == 0 {
        return Err(Error::invalid(
            "average precision is undefined on a dataset without ground truth",
        ));
    }
    let num_images = per_image.len();

    // ap[class][threshold]
    let mut ap = vec![vec![0.0f64; IOU_THRESHOLDS.len()]; classes];
    let mut class_gt = vec![0usize; classes];
    for (_, gts) in per_image {
        for gt in gts {
            class_gt[gt.class_id] += 1;
        }
    }
    let mut pr_curves = Vec::new();

    for (ti, &thresh) in IOU_THRESHOLDS.iter().enumerate() {
        // (score, image index, index within canonical image order, tp)
        let mut pooled: Vec<Vec<(f64, usize, usize, bool)>> = vec![Vec::new(); classes];
        for (img_idx, (dets, gts)) in per_image.iter().enumerate() {
            let m = match_detections(dets, gts, thresh)?;
            for (di, det) in m.detections.iter().enumerate() {
                pooled[det.class_id].push((det.score, img_idx, di, m.det_tp[di]));
            }
        }
        for (class_id, mut entries) in pooled.into_iter().enumerate() {
            if class_gt[class_id] == 0 {
                continue;
            }
            entries.sort_by(|a, b| {
                b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let flags: Vec<bool> = entries.iter().map(|e| e.3).collect();
            ap[class_id][ti] = interpolated_ap(&flags, class_gt[class_id]);
            if thresh == 0.5 || thresh == 0.75 {
                append_pr_curve(&mut pr_curves, class_id, thresh, &flags, class_gt[class_id]);
            }
        }
    }

    let mut per_class = Vec::with_capacity(classes);
    let mut class_means = Vec::new();
    let mut ap50s = Vec::new();
    let mut ap75s = Vec::new();
    for class_id in 0..classes {
        if class_gt[class_id] == 0 {
            per_class.push(ClassAp { class_id, ap: None });
            continue;
        }
        let mean = ap[class_id].iter().sum::<f64>() / IOU_THRESHOLDS.len() as f64;
        per_class.push(ClassAp {
            class_id,
            ap: Some(mean),
        });
        class_means.push(mean);
        ap50s.push(ap[class_id][0]);
        ap75s.push(ap[class_id][5]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalSummary {
        ap: mean(&class_means),
        ap50: mean(&ap50s),
        ap75: mean(&ap75s),
        per_class,
        pr_curves,
        num_images,
        num_gt,
    })
}

fn append_pr_curve(
    out: &mut Vec<PrPoint>,
    class_id: usize,
    iou: f64,
    tp_flags: &[bool],
    num_gt: usize,
) {
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        if flag {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    for j in 0..RECALL_SAMPLES {
        let r = j as f64 / (RECALL_SAMPLES - 1) as f64;
        let idx = recalls.partition_point(|x| *x < r);
        let p = if idx < precisions.len() {
            precisions[idx]
        } else {
            0.0
        };
        out.push(PrPoint {
            class_id,
            iou,
            recall: r,
            precision: p,
        });
    }
}

/// Evaluation report as persisted to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<ClassAp>,
    pub num_images: usize,
    pub num_gt: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pr_curves: Vec<PrPoint>,
}

impl EvalReport {
    pub fn from_summary(summary: &EvalSummary, seed: u64, config_hash: &str) -> Self {
        EvalReport {
            format: "sad-eval".into(),
            version: 1,
            ap: summary.ap,
            ap50: summary.ap50,
            ap75: summary.ap75,
            per_class: summary.per_class.clone(),
            num_images: summary.num_images,
            num_gt: summary.num_gt,
            seed,
            config_hash: config_hash.into(),
            pr_curves: summary.pr_curves.clone(),
        }
    }
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(format!("report json: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("report json: {e}")))
}

pub fn write_pr_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "class_id,iou,recall,precision")?;
    for p in &report.pr_curves {
        writeln!(out, "{},{},{},{}", p.class_id, p.iou, p.recall, p.precision)?;
    }
    out.flush()?;
    Ok(())
}

/// One row of the unlabeled-pool mixing sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoSweepRow {
    pub rho: f64,
    pub aps: Vec<f64>,
}

pub fn write_rho_sweep_csv(path: &Path, rows: &[RhoSweepRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let seeds = rows.first().map_or(0, |r| r.aps.len());
    let mut header = String::from("rho,mean_ap");
    for i in 0..seeds {
        header.push_str(&format!(",ap_seed{}", i + 1));
    }
    writeln!(out, "{header}")?;
    for row in rows {
        let mean = row.aps.iter().sum::<f64>() / row.aps.len().max(1) as f64;
        let mut line = format!("{},{}", row.rho, mean);
        for ap in &row.aps {
            line.push_str(&format!(",{ap}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Per-image detections persisted next to a report so the AP can be
/// recomputed from files alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: String,
    pub detections: Vec<Detection>,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::format(format!("detections json: {e}")))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("detections json: {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            class_id,
            x1,
            y1,
            x2,
            y2,
            score,
        }
    }

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
    fn perfect_detections_all_tp() {
        let gts = vec![gt(0, 0.0, 0.0, 2.0, 2.0), gt(1, 4.0, 4.0, 6.0, 6.0)];
        let dets = vec![
            det(0, 0.0, 0.0, 2.0, 2.0, 0.9),
            det(1, 4.0, 4.0, 6.0, 6.0, 0.8),
        ];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        assert!(m.det_tp.iter().all(|t| *t));
        assert!(m.gt_matched.iter().all(|t| *t));
    }

    #[test]
    fn no_detections_zero_recall() {
        let gts = vec![gt(0, 0.0, 0.0, 2.0, 2.0)];
        let m = match_detections(&[], &gts, 0.5).unwrap();
        assert!(m.det_tp.is_empty());
        assert!(!m.gt_matched[0]);
    }

    #[test]
    fn double_detection_is_one_tp_one_fp() {
        let gts = vec![gt(0, 0.0, 0.0, 2.0, 2.0)];
        let dets = vec![
            det(0, 0.0, 0.0, 2.0, 2.0, 0.9),
            det(0, 0.1, 0.0, 2.1, 2.0, 0.8),
        ];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        assert_eq!(m.det_tp, vec![true, false]);
    }

    #[test]
    fn hand_ap_case_is_one() {
        // one gt, a TP at 0.9 and an FP at 0.8: precision/recall points are
        // (1.0, 1.0) then (0.5, 1.0); the 101-point envelope is 1 everywhere.
        let gts = vec![gt(0, 0.0, 0.0, 2.0, 2.0)];
        let dets = vec![
            det(0, 0.0, 0.0, 2.0, 2.0, 0.9),
            det(0, 5.0, 5.0, 7.0, 7.0, 0.8),
        ];
        let summary = evaluate_detections(&[(dets, gts)], 1).unwrap();
        assert_eq!(summary.ap50, 1.0);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = vec![gt(0, 0.0, 0.0, 2.0, 2.0), gt(0, 5.0, 5.0, 8.0, 8.0)];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| det(0, g.x1, g.y1, g.x2, g.y2, 0.9))
            .collect();
        let s = evaluate_detections(&[(perfect, gts.clone())], 1).unwrap();
        assert_eq!(s.ap, 1.0);
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap75, 1.0);
        let s0 = evaluate_detections(&[(Vec::new(), gts)], 1).unwrap();
        assert_eq!(s0.ap, 0.0);
    }

    #[test]
    fn zero_gt_dataset_is_an_error() {
        assert!(evaluate_detections(&[(Vec::new(), Vec::new())], 1).is_err());
    }

    #[test]
    fn class_without_gt_reported_absent() {
        let gts = vec![gt(0, 0.0, 0.0, 2.0, 2.0)];
        let dets = vec![det(0, 0.0, 0.0, 2.0, 2.0, 0.9)];
        let s = evaluate_detections(&[(dets, gts)], 3).unwrap();
        assert!(s.per_class[0].ap.is_some());
        assert!(s.per_class[1].ap.is_none());
        assert!(s.per_class[2].ap.is_none());
        assert_eq!(s.ap, 1.0); // absent classes do not drag the mean down
    }

    #[test]
    fn matching_monotone_in_threshold() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let gts: Vec<GroundTruthBox> = (0..rng.gen_range(1..5))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..8.0);
                    let y1 = rng.gen_range(0.0..8.0);
                    gt(
                        rng.gen_range(0..2),
                        x1,
                        y1,
                        x1 + rng.gen_range(1.0..4.0),
                        y1 + rng.gen_range(1.0..4.0),
                    )
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.gen_range(0..8))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..8.0);
                    let y1 = rng.gen_range(0.0..8.0);
                    det(
                        rng.gen_range(0..2),
                        x1,
                        y1,
                        x1 + rng.gen_range(1.0..4.0),
                        y1 + rng.gen_range(1.0..4.0),
                        rng.gen_range(0.05..1.0),
                    )
                })
                .collect();
            let mut prev_tp = usize::MAX;
            for t in [0.3, 0.5, 0.7, 0.9] {
                let m = match_detections(&dets, &gts, t).unwrap();
                let tp = m.det_tp.iter().filter(|x| **x).count();
                assert!(tp <= prev_tp, "tp grew from {prev_tp} to {tp} at {t}");
                prev_tp = tp;
            }
        }
    }

    #[test]
    fn ap_ordering_across_thresholds() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut per_image = Vec::new();
        for _ in 0..20 {
            let gts: Vec<GroundTruthBox> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..8.0);
                    let y1 = rng.gen_range(0.0..8.0);
                    gt(0, x1, y1, x1 + rng.gen_range(1.0..4.0), y1 + rng.gen_range(1.0..4.0))
                })
                .collect();
            let mut dets: Vec<Detection> = Vec::new();
            for g in &gts {
                if rng.gen_bool(0.8) {
                    let jitter = rng.gen_range(-0.4..0.4);
                    dets.push(det(
                        0,
                        g.x1 + jitter,
                        g.y1,
                        g.x2 + jitter,
                        g.y2,
                        rng.gen_range(0.1..1.0),
                    ));
                }
            }
            per_image.push((dets, gts));
        }
        let s = evaluate_detections(&per_image, 1).unwrap();
        assert!(s.ap50 >= s.ap);
        assert!(s.ap >= 0.0 && s.ap <= 1.0);
    }

    #[test]
    fn report_roundtrip_identical() {
        let summary = EvalSummary {
            ap: 0.5,
            ap50: 0.75,
            ap75: 0.5,
            per_class: vec![ClassAp {
                class_id: 0,
                ap: Some(0.5),
            }],
            pr_curves: vec![PrPoint {
                class_id: 0,
                iou: 0.5,
                recall: 0.0,
                precision: 1.0,
            }],
            num_images: 3,
            num_gt: 4,
        };
        let report = EvalReport::from_summary(&summary, 7, "abc123");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report(&path, &report).unwrap();
        let loaded = read_report(&path).unwrap();
        let path2 = dir.path().join("report2.json");
        write_report(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
