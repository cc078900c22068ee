//! Teacher-side inference: detection decoding, NMS, score-threshold
//! calibration, and hard/soft target generation for the transfer set.
//!
//! Soft-target maps are dumped before any suppression: the dense
//! per-anchor-class probabilities are exactly what the distillation loss
//! consumes, including everything NMS would drop.

use crate::anchors::{decode_box, AnchorSet, BoxDelta};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, Box2D};
use crate::loss::sigmoid;
use crate::model::DenseModel;
use crate::scene::Scene;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Scores below this floor are discarded before anything else.
    pub score_floor: f64,
    /// Candidate cap ahead of NMS.
    pub pre_nms_top_k: usize,
    /// Greedy suppression overlap threshold.
    pub nms_iou: f64,
    /// Relative tolerance for threshold calibration.
    pub calibration_tolerance: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_floor: 0.05,
            pre_nms_top_k: 1000,
            nms_iou: 0.5,
            calibration_tolerance: 0.02,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::config("score_floor must be in [0, 1]"));
        }
        if self.pre_nms_top_k == 0 {
            return Err(Error::config("pre_nms_top_k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("nms_iou must be in [0, 1]"));
        }
        if self.calibration_tolerance <= 0.0 || self.calibration_tolerance >= 1.0 {
            return Err(Error::config("calibration_tolerance must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl Detection {
    pub fn rect(&self) -> Box2D {
        Box2D::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// Canonical detection order: score descending, then class and coordinates.
/// Sorting by content first makes every downstream greedy pass independent
/// of the order detections were produced in.
pub fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Dense teacher probabilities, anchor-major: `q[anchor * classes + class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetMap {
    pub anchors: usize,
    pub classes: usize,
    pub q: Vec<f32>,
}

impl SoftTargetMap {
    pub fn get(&self, anchor: usize, class: usize) -> f32 {
        self.q[anchor * self.classes + class]
    }
}

/// Decode dense detections for one scene. Returns the pre-NMS candidate
/// list (floored and capped at `pre_nms_top_k`) together with the complete
/// soft-target map taken before any suppression.
pub fn predict(
    model: &DenseModel,
    scene: &Scene,
    anchors: &AnchorSet,
    cfg: &InferenceConfig,
) -> Result<(Vec<Detection>, SoftTargetMap)> {
    cfg.validate()?;
    if anchors.len() != model.anchors_for(scene) {
        return Err(Error::invalid(format!(
            "anchor set size {} does not match scene {} ({} anchors)",
            anchors.len(),
            scene.scene_id,
            model.anchors_for(scene)
        )));
    }
    let out = model.forward(scene)?;
    let classes = model.dims.classes;
    let q: Vec<f32> = out.logits.iter().map(|&z| sigmoid(z) as f32).collect();
    let soft = SoftTargetMap {
        anchors: out.anchors,
        classes,
        q,
    };

    let (h, w) = (scene.h as f64, scene.w as f64);
    let mut candidates = Vec::new();
    for a in 0..out.anchors {
        let delta = BoxDelta {
            dx: out.deltas[a * 4],
            dy: out.deltas[a * 4 + 1],
            dw: out.deltas[a * 4 + 2],
            dh: out.deltas[a * 4 + 3],
        };
        let mut decoded: Option<Box2D> = None;
        for c in 0..classes {
            let score = sigmoid(out.logits[a * classes + c]);
            if score < cfg.score_floor {
                continue;
            }
            let rect = match decoded {
                Some(r) => r,
                None => {
                    let mut r = decode_box(anchors.get(a), &delta)?;
                    r.x1 = r.x1.clamp(0.0, w);
                    r.y1 = r.y1.clamp(0.0, h);
                    r.x2 = r.x2.clamp(0.0, w);
                    r.y2 = r.y2.clamp(0.0, h);
                    decoded = Some(r);
                    r
                }
            };
            if !rect.is_valid() {
                continue;
            }
            candidates.push(Detection {
                class_id: c,
                x1: rect.x1,
                y1: rect.y1,
                x2: rect.x2,
                y2: rect.y2,
                score,
            });
        }
    }
    candidates.sort_by(canonical_order);
    candidates.truncate(cfg.pre_nms_top_k);
    Ok((candidates, soft))
}

/// Greedy class-wise non-maximum suppression by descending score; the
/// output is sorted by score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::invalid("nms iou threshold must be in [0, 1]"));
    }
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::invalid(format!("non-finite score in nms: {d:?}")));
        }
    }
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(canonical_order);
    let mut kept: Vec<Detection> = Vec::new();
    'outer: for d in sorted {
        for k in &kept {
            if k.class_id == d.class_id && iou_unchecked(&k.rect(), &d.rect()) >= iou_thresh {
                continue 'outer;
            }
        }
        kept.push(d);
    }
    Ok(kept)
}

/// Full per-scene detection path: predict, suppress, optionally filter by a
/// score threshold.
pub fn detect(
    model: &DenseModel,
    scene: &Scene,
    anchors: &AnchorSet,
    cfg: &InferenceConfig,
    threshold: Option<f64>,
) -> Result<Vec<Detection>> {
    let (candidates, _) = predict(model, scene, anchors, cfg)?;
    let mut kept = nms(&candidates, cfg.nms_iou)?;
    if let Some(t) = threshold {
        kept.retain(|d| d.score >= t);
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub avg_instances_labeled: f64,
    pub avg_instances_unlabeled_at_threshold: f64,
    /// The calibrated averages agree within the configured tolerance.
    pub within_tolerance: bool,
    /// The target was unreachable even at the score floor.
    pub boundary: bool,
}

fn count_at(sorted_desc: &[f64], t: f64) -> usize {
    // scores >= t in a descending-sorted list
    sorted_desc.partition_point(|s| *s >= t)
}

/// Pick the score threshold that makes the average number of teacher
/// annotations per unlabeled image match the labeled average. The count is
/// non-increasing in the threshold, so bisection converges to the largest
/// threshold that still reaches the target.
pub fn calibrate_threshold(
    teacher: &DenseModel,
    unlabeled: &[Scene],
    labeled_avg_instances: f64,
    anchors: &AnchorSet,
    cfg: &InferenceConfig,
) -> Result<CalibrationResult> {
    if unlabeled.is_empty() {
        return Err(Error::invalid("calibration needs at least one scene"));
    }
    if !(labeled_avg_instances > 0.0) {
        return Err(Error::invalid("labeled average must be positive"));
    }
    let mut scores: Vec<f64> = Vec::new();
    for scene in unlabeled {
        for d in detect(teacher, scene, anchors, cfg, None)? {
            scores.push(d.score);
        }
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let n = unlabeled.len() as f64;
    let avg = |t: f64| count_at(&scores, t) as f64 / n;
    let tol = cfg.calibration_tolerance;
    let target = labeled_avg_instances;

    if avg(cfg.score_floor) < target {
        let at = avg(cfg.score_floor);
        return Ok(CalibrationResult {
            threshold: cfg.score_floor,
            avg_instances_labeled: target,
            avg_instances_unlabeled_at_threshold: at,
            within_tolerance: (at - target).abs() <= tol * target,
            boundary: true,
        });
    }

    let mut lo = cfg.score_floor; // avg(lo) >= target
    let mut hi = 1.0; // avg(hi) < target (scores stay below 1)
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let at = avg(lo);
    Ok(CalibrationResult {
        threshold: lo,
        avg_instances_labeled: target,
        avg_instances_unlabeled_at_threshold: at,
        within_tolerance: (at - target).abs() <= tol * target,
        boundary: false,
    })
}

/// Per-scene teacher outputs: thresholded post-NMS hard targets plus the
/// dense pre-NMS soft-target map.
#[derive(Debug, Clone)]
pub struct TargetRecord {
    pub scene_id: String,
    pub hard_targets: Vec<Detection>,
    pub soft: SoftTargetMap,
}

pub fn generate_targets(
    teacher: &DenseModel,
    scenes: &[Scene],
    calibration: &CalibrationResult,
    anchors: &AnchorSet,
    cfg: &InferenceConfig,
) -> Result<Vec<TargetRecord>> {
    scenes
        .iter()
        .map(|scene| {
            let (candidates, soft) = predict(teacher, scene, anchors, cfg)?;
            let mut hard = nms(&candidates, cfg.nms_iou)?;
            hard.retain(|d| d.score >= calibration.threshold);
            Ok(TargetRecord {
                scene_id: scene.scene_id.clone(),
                hard_targets: hard,
                soft,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RecordsHeader {
    format: String,
    version: u32,
    config_hash: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    scene_id: String,
    hard_targets: Vec<Detection>,
    soft_path: String,
    anchors: usize,
    classes: usize,
}

/// Persist target records: `records.jsonl` plus one little-endian f32
/// binary block per scene under `soft/`, and the calibration next to them.
pub fn write_target_records(
    dir: &Path,
    records: &[TargetRecord],
    calibration: &CalibrationResult,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("soft"))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("records.jsonl"))?);
    let header = RecordsHeader {
        format: "sad-targets".into(),
        version: 1,
        config_hash: config_hash.into(),
        count: records.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
    for rec in records {
        let soft_rel = format!("soft/{}.bin", rec.scene_id);
        let line = RecordLine {
            scene_id: rec.scene_id.clone(),
            hard_targets: rec.hard_targets.clone(),
            soft_path: soft_rel.clone(),
            anchors: rec.soft.anchors,
            classes: rec.soft.classes,
        };
        writeln!(out, "{}", serde_json::to_string(&line).map_err(json_err)?)?;
        let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join(&soft_rel))?);
        for v in &rec.soft.q {
            bin.write_all(&v.to_le_bytes())?;
        }
        bin.flush()?;
    }
    out.flush()?;
    let calib = serde_json::to_string_pretty(&CalibrationFile {
        calibration: *calibration,
        config_hash: config_hash.into(),
    })
    .map_err(json_err)?;
    std::fs::write(dir.join("calibration.json"), calib + "\n")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    calibration: CalibrationResult,
    config_hash: String,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::format(format!("json: {e}"))
}

/// Config hash recorded in a records directory's header line.
pub fn read_records_config_hash(dir: &Path) -> Result<String> {
    let file = std::io::BufReader::new(std::fs::File::open(dir.join("records.jsonl"))?);
    let header_line = file
        .lines()
        .next()
        .ok_or_else(|| Error::format("records file is empty"))??;
    let header: RecordsHeader = serde_json::from_str(&header_line).map_err(json_err)?;
    Ok(header.config_hash)
}

pub fn read_calibration(dir: &Path) -> Result<CalibrationResult> {
    let text = std::fs::read_to_string(dir.join("calibration.json"))?;
    let file: CalibrationFile = serde_json::from_str(&text).map_err(json_err)?;
    Ok(file.calibration)
}

/// Load persisted target records, keyed and ordered by scene id.
pub fn read_target_records(dir: &Path) -> Result<BTreeMap<String, TargetRecord>> {
    let path: PathBuf = dir.join("records.jsonl");
    let file = std::io::BufReader::new(std::fs::File::open(&path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format("records file is empty"))??;
    let header: RecordsHeader = serde_json::from_str(&header_line).map_err(json_err)?;
    if header.format != "sad-targets" || header.version != 1 {
        return Err(Error::format(format!(
            "unsupported records file {} ({} v{})",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut records = BTreeMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(json_err)?;
        let mut bin = std::io::BufReader::new(std::fs::File::open(dir.join(&rec.soft_path))?);
        let mut q = Vec::with_capacity(rec.anchors * rec.classes);
        let mut buf = [0u8; 4];
        for _ in 0..rec.anchors * rec.classes {
            bin.read_exact(&mut buf)?;
            q.push(f32::from_le_bytes(buf));
        }
        records.insert(
            rec.scene_id.clone(),
            TargetRecord {
                scene_id: rec.scene_id,
                hard_targets: rec.hard_targets,
                soft: SoftTargetMap {
                    anchors: rec.anchors,
                    classes: rec.classes,
                    q,
                },
            },
        );
    }
    if records.len() != header.count {
        return Err(Error::format(format!(
            "records file declares {} records but contains {}",
            header.count,
            records.len()
        )));
    }
    Ok(records)
}
